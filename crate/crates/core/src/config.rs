//! Run configuration: flat `key = value` text with typed validation.
//!
//! Unknown keys are rejected. `#` starts a comment. Every key can also be
//! overridden from the environment as `XSMOE_<KEY>` (upper-cased).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Modality, ModelDims};
use crate::seqrec::EncoderConfig;

pub const ENV_PREFIX: &str = "XSMOE_";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Expand, freeze, and prune every window.
    Xsmoe,
    /// One expert per layer, fine-tuned throughout.
    Static,
    /// No side networks; the last backbone layer feeds the fusion head.
    NoFt,
    /// Visual side network only.
    Visual,
    /// Textual side network only.
    Textual,
}

impl Variant {
    pub fn modalities(self) -> Vec<Modality> {
        match self {
            Variant::Visual => vec![Modality::Visual],
            Variant::Textual => vec![Modality::Textual],
            _ => Modality::ALL.to_vec(),
        }
    }

    pub fn uses(self, m: Modality) -> bool {
        self.modalities().contains(&m)
    }

    pub fn has_side_network(self) -> bool {
        self != Variant::NoFt
    }

    /// Whether windows expand and prune the side networks.
    pub fn expands(self) -> bool {
        matches!(self, Variant::Xsmoe | Variant::Visual | Variant::Textual)
    }

    pub fn tag(self) -> u8 {
        match self {
            Variant::Xsmoe => 0,
            Variant::Static => 1,
            Variant::NoFt => 2,
            Variant::Visual => 3,
            Variant::Textual => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        [Variant::Xsmoe, Variant::Static, Variant::NoFt, Variant::Visual, Variant::Textual]
            .into_iter()
            .find(|v| v.tag() == tag)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Xsmoe => "xsmoe",
            Variant::Static => "static",
            Variant::NoFt => "noft",
            Variant::Visual => "visual",
            Variant::Textual => "textual",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "xsmoe" => Ok(Variant::Xsmoe),
            "static" => Ok(Variant::Static),
            "noft" => Ok(Variant::NoFt),
            "visual" => Ok(Variant::Visual),
            "textual" => Ok(Variant::Textual),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected xsmoe, static, noft, visual, textual)"
            ))),
        }
    }
}

/// Everything a streaming run needs. Defaults are desk scale.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub seed: u64,
    pub tau: f64,
    pub utilization_includes_backbone: bool,

    pub dim: usize,
    pub hidden: usize,
    pub embed: usize,
    pub side_layers: usize,
    pub group_factor: usize,
    pub max_seq_len: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub ffn_dim: usize,
    pub dropout: f32,

    pub lr_init: f64,
    pub lr_decay: f64,
    pub lr_min: f64,
    pub patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,

    pub chunks: usize,
    pub train_fraction: f64,
    pub eval_next_chunk_fraction: f64,
    pub filter_seen: bool,
    pub eval_threads: usize,
    pub timing: bool,

    pub interactions: Option<PathBuf>,
    pub visual_cache: Option<PathBuf>,
    pub textual_cache: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::Xsmoe,
            seed: 42,
            tau: 0.1,
            utilization_includes_backbone: false,
            dim: 32,
            hidden: 8,
            embed: 32,
            side_layers: 2,
            group_factor: 1,
            max_seq_len: 10,
            heads: 2,
            encoder_blocks: 2,
            ffn_dim: 32,
            dropout: 0.1,
            lr_init: 0.001,
            lr_decay: 0.95,
            lr_min: 0.0001,
            patience: 5,
            batch_size: 128,
            max_epochs: 50,
            chunks: 10,
            train_fraction: 0.85,
            eval_next_chunk_fraction: 1.0,
            filter_seen: false,
            eval_threads: 0,
            timing: true,
            interactions: None,
            visual_cache: None,
            textual_cache: None,
            output_dir: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "variant",
    "seed",
    "tau",
    "utilization_includes_backbone",
    "dim",
    "hidden",
    "embed",
    "side_layers",
    "group_factor",
    "max_seq_len",
    "heads",
    "encoder_blocks",
    "ffn_dim",
    "dropout",
    "lr_init",
    "lr_decay",
    "lr_min",
    "patience",
    "batch_size",
    "max_epochs",
    "chunks",
    "train_fraction",
    "eval_next_chunk_fraction",
    "filter_seen",
    "eval_threads",
    "timing",
    "interactions",
    "visual_cache",
    "textual_cache",
    "output_dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Full-size dimensions: 768-wide 12-layer backbones grouped 6+6,
    /// 64-wide experts, batch 256.
    pub fn full_scale() -> Self {
        RunConfig {
            dim: 768,
            hidden: 64,
            embed: 768,
            side_layers: 2,
            group_factor: 6,
            ffn_dim: 768,
            batch_size: 256,
            ..RunConfig::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "variant" => self.variant = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "utilization_includes_backbone" => self.utilization_includes_backbone = parse_bool(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "embed" => self.embed = parse(key, value)?,
            "side_layers" => self.side_layers = parse(key, value)?,
            "group_factor" => self.group_factor = parse(key, value)?,
            "max_seq_len" => self.max_seq_len = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "encoder_blocks" => self.encoder_blocks = parse(key, value)?,
            "ffn_dim" => self.ffn_dim = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "lr_init" => self.lr_init = parse(key, value)?,
            "lr_decay" => self.lr_decay = parse(key, value)?,
            "lr_min" => self.lr_min = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "chunks" => self.chunks = parse(key, value)?,
            "train_fraction" => self.train_fraction = parse(key, value)?,
            "eval_next_chunk_fraction" => self.eval_next_chunk_fraction = parse(key, value)?,
            "filter_seen" => self.filter_seen = parse_bool(key, value)?,
            "eval_threads" => self.eval_threads = parse(key, value)?,
            "timing" => self.timing = parse_bool(key, value)?,
            "interactions" => self.interactions = parse_path(value),
            "visual_cache" => self.visual_cache = parse_path(value),
            "textual_cache" => self.textual_cache = parse_path(value),
            "output_dir" => self.output_dir = parse_path(value),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Some(match key {
            "variant" => self.variant.to_string(),
            "seed" => self.seed.to_string(),
            "tau" => self.tau.to_string(),
            "utilization_includes_backbone" => self.utilization_includes_backbone.to_string(),
            "dim" => self.dim.to_string(),
            "hidden" => self.hidden.to_string(),
            "embed" => self.embed.to_string(),
            "side_layers" => self.side_layers.to_string(),
            "group_factor" => self.group_factor.to_string(),
            "max_seq_len" => self.max_seq_len.to_string(),
            "heads" => self.heads.to_string(),
            "encoder_blocks" => self.encoder_blocks.to_string(),
            "ffn_dim" => self.ffn_dim.to_string(),
            "dropout" => self.dropout.to_string(),
            "lr_init" => self.lr_init.to_string(),
            "lr_decay" => self.lr_decay.to_string(),
            "lr_min" => self.lr_min.to_string(),
            "patience" => self.patience.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "chunks" => self.chunks.to_string(),
            "train_fraction" => self.train_fraction.to_string(),
            "eval_next_chunk_fraction" => self.eval_next_chunk_fraction.to_string(),
            "filter_seen" => self.filter_seen.to_string(),
            "eval_threads" => self.eval_threads.to_string(),
            "timing" => self.timing.to_string(),
            "interactions" => path(&self.interactions),
            "visual_cache" => path(&self.visual_cache),
            "textual_cache" => path(&self.textual_cache),
            "output_dir" => path(&self.output_dir),
            _ => return None,
        })
    }

    /// Parses `key = value` lines on top of the defaults.
    pub fn parse_kv(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse_kv(&text)
    }

    /// Applies `XSMOE_<KEY>` overrides from the given environment.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        for (name, value) in vars {
            let Some(key) = name.strip_prefix(ENV_PREFIX) else { continue };
            let key = key.to_ascii_lowercase();
            if KEYS.contains(&key.as_str()) {
                self.set(&key, &value)?;
            } else {
                return Err(Error::Config(format!("unknown environment override {name}")));
            }
        }
        Ok(())
    }

    /// Fully resolved config, one key per line, in a stable order.
    pub fn to_kv_string(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau {} outside [0, 1]", self.tau));
        }
        for (k, v) in [
            ("dim", self.dim),
            ("hidden", self.hidden),
            ("embed", self.embed),
            ("side_layers", self.side_layers),
            ("group_factor", self.group_factor),
            ("max_seq_len", self.max_seq_len),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
        ] {
            if v == 0 {
                return bad(format!("{k} must be positive"));
            }
        }
        if !self.embed.is_multiple_of(self.heads) {
            return bad(format!("embed {} not divisible by heads {}", self.embed, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.lr_init > 0.0) || !(self.lr_min > 0.0) || self.lr_min > self.lr_init {
            return bad(format!("need 0 < lr_min <= lr_init, got {} and {}", self.lr_min, self.lr_init));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay {} outside (0, 1]", self.lr_decay));
        }
        if self.chunks < 3 {
            return bad(format!("need at least 3 chunks, got {}", self.chunks));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad(format!("train_fraction {} outside (0, 1]", self.train_fraction));
        }
        if !(self.eval_next_chunk_fraction > 0.0 && self.eval_next_chunk_fraction <= 1.0) {
            return bad(format!(
                "eval_next_chunk_fraction {} outside (0, 1]",
                self.eval_next_chunk_fraction
            ));
        }
        Ok(())
    }

    /// Checks that the caches the variant needs are configured, and that
    /// no unused cache is required.
    pub fn validate_paths(&self) -> Result<()> {
        if self.interactions.is_none() {
            return Err(Error::Config("interactions path is required".into()));
        }
        for m in self.variant.modalities() {
            let p = match m {
                Modality::Visual => &self.visual_cache,
                Modality::Textual => &self.textual_cache,
            };
            match p {
                None => return Err(Error::Config(format!("variant {} requires a {m} cache", self.variant))),
                Some(p) if !p.exists() => {
                    return Err(Error::Config(format!(
                        "variant {} requires the {m} cache, but {} does not exist",
                        self.variant,
                        p.display()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            dim: self.dim,
            hidden: self.hidden,
            embed: self.embed,
            side_layers: self.side_layers,
            group_factor: self.group_factor,
            encoder: EncoderConfig {
                dim: self.embed,
                max_len: self.max_seq_len,
                heads: self.heads,
                blocks: self.encoder_blocks,
                ffn_dim: self.ffn_dim,
                dropout: self.dropout,
            },
        }
    }

    pub fn eval_threads(&self) -> usize {
        if self.eval_threads > 0 {
            self.eval_threads
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }
}
