//! Synthetic multimodal stream with controllable preference drift.
//!
//! Items carry a latent vector split into a shared block and one private
//! block per modality. Each modality's fake backbone sees the shared block
//! plus its own private block: layer 0 is a noisy linear projection and every
//! deeper layer is a squashed low-rank remix of the previous one, so the top
//! layer keeps less of the latent than layer 0 does. Users hold a unit
//! preference vector that blends toward a fresh random direction by `drift`
//! every window; interactions are sampled by softmax over user·item affinity
//! among the items released so far.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::cache::{write_cache, FeatureCache};
use super::interactions::{write_interactions, Interaction};
use crate::error::{CacheError, Error, Result};
use crate::model::Modality;
use crate::numerics::rng_for;

/// Gap between window timestamp origins.
pub const WINDOW_SPAN: i64 = 10_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub users: usize,
    pub items: usize,
    pub windows: usize,
    pub drift: f64,
    pub interactions_per_window: usize,
    pub shared_latent: usize,
    pub private_latent: usize,
    /// Backbone width `d`.
    pub dim: usize,
    /// Feature layers per item, `M + 1`.
    pub depth: usize,
    /// Rank of each deeper backbone layer's remix.
    pub backbone_rank: usize,
    pub layer_noise: f32,
    pub temperature: f32,
    pub popularity_spread: f32,
    /// Fraction of the catalog released before window 0.
    pub initial_items: f64,
    pub max_session: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 42,
            users: 2000,
            items: 500,
            windows: 6,
            drift: 0.5,
            interactions_per_window: 2000,
            shared_latent: 4,
            private_latent: 6,
            dim: 32,
            depth: 3,
            backbone_rank: 12,
            layer_noise: 0.05,
            temperature: 0.35,
            popularity_spread: 0.5,
            initial_items: 0.6,
            max_session: 4,
        }
    }
}

impl SynthConfig {
    pub fn latent_dim(&self) -> usize {
        self.shared_latent + 2 * self.private_latent
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("users", self.users),
            ("items", self.items),
            ("windows", self.windows),
            ("interactions_per_window", self.interactions_per_window),
            ("dim", self.dim),
            ("depth", self.depth),
            ("backbone_rank", self.backbone_rank),
            ("max_session", self.max_session),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("synth: {name} must be positive")));
        }
        if self.latent_dim() == 0 {
            return Err(Error::Config("synth: latent dimension must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.drift) {
            return Err(Error::Config(format!("synth: drift {} outside [0, 1]", self.drift)));
        }
        if !(self.initial_items > 0.0 && self.initial_items <= 1.0) {
            return Err(Error::Config(format!("synth: initial_items {} outside (0, 1]", self.initial_items)));
        }
        if !(self.temperature > 0.0) || !(self.layer_noise >= 0.0) || !(self.popularity_spread >= 0.0) {
            return Err(Error::Config("synth: temperature must be positive, noise and spread non-negative".into()));
        }
        Ok(())
    }
}

/// A generated world: latents, interactions, and both feature caches.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub config: SynthConfig,
    /// Per window, `users × latent` unit rows.
    pub user_latents: Vec<Vec<f32>>,
    /// `items × latent`
    pub item_latents: Vec<f32>,
    pub item_bias: Vec<f32>,
    pub item_debut: Vec<usize>,
    pub interactions: Vec<Interaction>,
    pub visual: FeatureCache,
    pub textual: FeatureCache,
}

pub fn user_id(u: usize) -> u64 {
    u as u64 + 1
}

pub fn item_id(i: usize) -> u64 {
    i as u64 + 1
}

pub fn window_of(timestamp: i64) -> usize {
    (timestamp / WINDOW_SPAN) as usize
}

fn gaussian<R: Rng>(rng: &mut R, n: usize, std: f32) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal) * std).collect()
}

fn normalize(v: &mut [f32]) {
    let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
    }
}

/// `out[r] = Σ_c m[r, c] · x[c]` for a row-major `rows × x.len()` matrix.
fn matvec(m: &[f32], x: &[f32]) -> Vec<f32> {
    m.chunks_exact(x.len())
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

impl SyntheticWorld {
    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim()
    }

    /// Ground-truth logit of user `u` for item `i` during window `w`.
    pub fn affinity(&self, w: usize, u: usize, i: usize) -> f32 {
        let k = self.latent_dim();
        let user = &self.user_latents[w][u * k..(u + 1) * k];
        let item = &self.item_latents[i * k..(i + 1) * k];
        let dot: f32 = user.iter().zip(item).map(|(a, b)| a * b).sum();
        dot / self.config.temperature + self.item_bias[i]
    }

    pub fn released(&self, w: usize) -> Vec<usize> {
        (0..self.config.items).filter(|&i| self.item_debut[i] <= w).collect()
    }

    pub fn cache(&self, m: Modality) -> &FeatureCache {
        match m {
            Modality::Visual => &self.visual,
            Modality::Textual => &self.textual,
        }
    }

    pub fn ground_truth(&self) -> GroundTruth {
        let c = &self.config;
        let mut affinity = Vec::with_capacity(c.windows * c.users * c.items);
        for w in 0..c.windows {
            for u in 0..c.users {
                affinity.extend((0..c.items).map(|i| self.affinity(w, u, i)));
            }
        }
        GroundTruth {
            windows: c.windows,
            users: c.users,
            items: c.items,
            item_debut: self.item_debut.clone(),
            affinity,
        }
    }
}

pub fn synthesize(config: &SynthConfig) -> Result<SyntheticWorld> {
    config.validate()?;
    let c = config;
    let k = c.latent_dim();

    let mut rng = rng_for(c.seed, "synth/items");
    let item_latents = gaussian(&mut rng, c.items * k, 1.0);
    let item_bias = gaussian(&mut rng, c.items, c.popularity_spread);
    let initial = ((c.items as f64 * c.initial_items).ceil() as usize).clamp(1, c.items);
    let mut order: Vec<usize> = (0..c.items).collect();
    order.shuffle(&mut rng);
    let mut item_debut = vec![0usize; c.items];
    for (pos, &i) in order.iter().enumerate().skip(initial) {
        item_debut[i] = if c.windows > 1 { 1 + (pos - initial) * (c.windows - 1) / (c.items - initial) } else { 0 };
    }

    let mut rng = rng_for(c.seed, "synth/users");
    let mut current = Vec::with_capacity(c.users * k);
    for _ in 0..c.users {
        let mut u = gaussian(&mut rng, k, 1.0);
        normalize(&mut u);
        current.extend(u);
    }
    let mut user_latents = vec![current.clone()];
    let (keep, blend) = ((1.0 - c.drift).sqrt() as f32, c.drift.sqrt() as f32);
    for _ in 1..c.windows {
        if c.drift > 0.0 {
            for row in current.chunks_exact_mut(k) {
                let mut fresh = gaussian(&mut rng, k, 1.0);
                normalize(&mut fresh);
                row.iter_mut().zip(&fresh).for_each(|(a, b)| *a = keep * *a + blend * b);
                normalize(row);
            }
        }
        user_latents.push(current.clone());
    }

    let visual = backbone_features(c, Modality::Visual, &item_latents)?;
    let textual = backbone_features(c, Modality::Textual, &item_latents)?;

    let mut world = SyntheticWorld {
        config: c.clone(),
        user_latents,
        item_latents,
        item_bias,
        item_debut,
        interactions: Vec::new(),
        visual,
        textual,
    };
    world.interactions = sample_interactions(&world, &mut rng_for(c.seed, "synth/interactions"));
    Ok(world)
}

fn backbone_features(c: &SynthConfig, m: Modality, latents: &[f32]) -> Result<FeatureCache> {
    let k = c.latent_dim();
    let d = c.dim;
    let private_start = c.shared_latent
        + match m {
            Modality::Visual => 0,
            Modality::Textual => c.private_latent,
        };
    let view_dim = c.shared_latent + c.private_latent;
    let mut rng = rng_for(c.seed, &format!("synth/backbone/{m}"));
    let input = gaussian(&mut rng, d * view_dim, 1.0 / (view_dim as f32).sqrt());
    let remix: Vec<(Vec<f32>, Vec<f32>)> = (1..c.depth)
        .map(|_| {
            let down = gaussian(&mut rng, c.backbone_rank * d, 1.0 / (d as f32).sqrt());
            let up = gaussian(&mut rng, d * c.backbone_rank, 1.5 / (c.backbone_rank as f32).sqrt());
            (down, up)
        })
        .collect();
    let mut noise_rng = rng_for(c.seed, &format!("synth/noise/{m}"));
    let mut data = Vec::with_capacity(c.items * c.depth * d);
    for i in 0..c.items {
        let z = &latents[i * k..(i + 1) * k];
        let view: Vec<f32> = z[..c.shared_latent]
            .iter()
            .chain(&z[private_start..private_start + c.private_latent])
            .copied()
            .collect();
        let mut layer = matvec(&input, &view);
        for (v, e) in layer.iter_mut().zip(gaussian(&mut noise_rng, d, c.layer_noise)) {
            *v += e;
        }
        data.extend_from_slice(&layer);
        for (down, up) in &remix {
            let mixed = matvec(up, &matvec(down, &layer));
            let noise = gaussian(&mut noise_rng, d, c.layer_noise);
            layer = mixed.iter().zip(noise).map(|(v, e)| v.tanh() + e).collect();
            data.extend_from_slice(&layer);
        }
    }
    FeatureCache::new(m, c.depth, d, (0..c.items).map(item_id).collect(), data)
}

fn sample_interactions(world: &SyntheticWorld, rng: &mut ChaCha8Rng) -> Vec<Interaction> {
    let c = &world.config;
    let mut out = Vec::with_capacity(c.windows * c.interactions_per_window);
    let mut cumulative = Vec::with_capacity(c.items);
    for w in 0..c.windows {
        let released = world.released(w);
        let mut emitted = 0;
        while emitted < c.interactions_per_window {
            let u = rng.random_range(0..c.users);
            let session = rng.random_range(1..=c.max_session).min(c.interactions_per_window - emitted);
            let logits: Vec<f32> = released.iter().map(|&i| world.affinity(w, u, i)).collect();
            let top = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            cumulative.clear();
            let mut acc = 0.0f64;
            for l in &logits {
                acc += ((l - top) as f64).exp();
                cumulative.push(acc);
            }
            for _ in 0..session {
                let x = rng.random::<f64>() * acc;
                let pick = cumulative.partition_point(|&p| p <= x).min(released.len() - 1);
                out.push(Interaction::new(
                    user_id(u),
                    item_id(released[pick]),
                    w as i64 * WINDOW_SPAN + emitted as i64,
                ));
                emitted += 1;
            }
        }
    }
    out
}

pub const TRUTH_MAGIC: [u8; 4] = *b"XSMG";
pub const TRUTH_VERSION: u8 = 1;

/// Ground-truth affinity logits per window, `windows × users × items`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub windows: usize,
    pub users: usize,
    pub items: usize,
    pub item_debut: Vec<usize>,
    pub affinity: Vec<f32>,
}

impl GroundTruth {
    pub fn get(&self, w: usize, u: usize, i: usize) -> f32 {
        self.affinity[(w * self.users + u) * self.items + i]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + 4 * (self.items + self.affinity.len()));
        out.extend_from_slice(&TRUTH_MAGIC);
        out.push(TRUTH_VERSION);
        for v in [self.windows, self.users, self.items] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &d in &self.item_debut {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.affinity {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CacheError> {
        if bytes.len() < 17 {
            return Err(CacheError::Truncated {
                expected: 17,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4-byte slice");
        if magic != TRUTH_MAGIC {
            return Err(CacheError::BadMagic {
                expected: TRUTH_MAGIC,
                found: magic,
            });
        }
        if bytes[4] != TRUTH_VERSION {
            return Err(CacheError::Version(bytes[4]));
        }
        let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4-byte slice"));
        let (windows, users, items) = (word(5) as usize, word(9) as usize, word(13) as usize);
        let cells = windows
            .checked_mul(users)
            .and_then(|v| v.checked_mul(items))
            .ok_or_else(|| CacheError::Header("affinity size overflows".into()))?;
        let expected = 17 + 4 * items + 4 * cells;
        if bytes.len() != expected {
            return Err(if bytes.len() < expected {
                CacheError::Truncated {
                    expected,
                    found: bytes.len(),
                }
            } else {
                CacheError::Trailing(bytes.len() - expected)
            });
        }
        let item_debut = (0..items).map(|i| word(17 + 4 * i) as usize).collect();
        let affinity = bytes[17 + 4 * items..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        Ok(GroundTruth {
            windows,
            users,
            items,
            item_debut,
            affinity,
        })
    }
}

/// Output files of [`write_world`].
#[derive(Clone, Debug)]
pub struct SynthPaths {
    pub interactions: PathBuf,
    pub visual: PathBuf,
    pub textual: PathBuf,
    pub truth: PathBuf,
}

impl SynthPaths {
    pub fn in_dir(dir: &Path) -> Self {
        SynthPaths {
            interactions: dir.join("interactions.csv"),
            visual: dir.join("visual.xsmf"),
            textual: dir.join("textual.xsmf"),
            truth: dir.join("truth.xsmg"),
        }
    }

    pub fn all(&self) -> [&Path; 4] {
        [&self.interactions, &self.visual, &self.textual, &self.truth]
    }
}

pub fn write_world(dir: &Path, world: &SyntheticWorld) -> Result<SynthPaths> {
    std::fs::create_dir_all(dir)?;
    let paths = SynthPaths::in_dir(dir);
    write_interactions(&paths.interactions, &world.interactions)?;
    write_cache(&paths.visual, &world.visual)?;
    write_cache(&paths.textual, &world.textual)?;
    std::fs::write(&paths.truth, world.ground_truth().to_bytes())?;
    Ok(paths)
}
