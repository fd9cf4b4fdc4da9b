//! Side-tuning networks of expandable experts, fusion, and the full model.

mod accounting;
pub mod checkpoint;
mod expert;
mod fusion;
mod layer;
mod side;

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use accounting::{
    closed_form_total, closed_form_trainable, count_tensors, layered_form, param_counts, ParamCount,
};
pub use expert::ExpertNet;
pub use fusion::FusionHead;
pub use layer::{LayerOutput, Router, SideLayer, Utilization};
pub use side::{FeatureStack, LayerPruneOutcome, SideNetwork, SideOutput};

use crate::config::Variant;
use crate::error::{Error, Result};
use crate::numerics::{rng_for, Graph, Tensor, Var};
use crate::seqrec::{EncoderConfig, SeqEncoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Textual,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Visual, Modality::Textual];

    pub fn tag(self) -> u8 {
        match self {
            Modality::Visual => 0,
            Modality::Textual => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Modality::Visual),
            1 => Some(Modality::Textual),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Visual => "visual",
            Modality::Textual => "textual",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelDims {
    /// Backbone / side-network width `d`.
    pub dim: usize,
    /// Expert bottleneck `d′`.
    pub hidden: usize,
    /// Item embedding width `d_e`.
    pub embed: usize,
    /// Side layers per modality `M`.
    pub side_layers: usize,
    pub group_factor: usize,
    pub encoder: EncoderConfig,
}

/// Feature stacks for one block of items, per modality.
#[derive(Clone, Copy, Debug, Default)]
pub struct ItemFeatures<'a> {
    pub visual: Option<&'a FeatureStack>,
    pub textual: Option<&'a FeatureStack>,
}

impl<'a> ItemFeatures<'a> {
    pub fn get(&self, m: Modality) -> Option<&'a FeatureStack> {
        match m {
            Modality::Visual => self.visual,
            Modality::Textual => self.textual,
        }
    }
}

/// Graph handles from embedding a block of items.
#[derive(Clone, Debug)]
pub struct ItemEmbedding {
    pub emb: Var,
    pub side: Vec<(Modality, SideOutput)>,
}

/// Per-modality side networks, fusion head, and sequence encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct XsmoeModel {
    pub dims: ModelDims,
    pub variant: Variant,
    pub visual: Option<SideNetwork>,
    pub textual: Option<SideNetwork>,
    pub fusion: FusionHead,
    pub encoder: SeqEncoder,
}

impl XsmoeModel {
    pub fn new(dims: ModelDims, variant: Variant, seed: u64) -> Result<Self> {
        if dims.encoder.dim != dims.embed {
            return Err(Error::Config(format!(
                "encoder width {} must equal item embedding width {}",
                dims.encoder.dim, dims.embed
            )));
        }
        let mut side_rng = rng_for(seed, "model/side");
        let side = |m: Modality, rng: &mut dyn rand::RngCore| -> Option<SideNetwork> {
            (variant.uses(m) && variant.has_side_network())
                .then(|| SideNetwork::new(m, dims.side_layers, dims.dim, dims.hidden, dims.group_factor, rng))
        };
        let visual = side(Modality::Visual, &mut side_rng);
        let textual = side(Modality::Textual, &mut side_rng);
        let fusion_in = dims.dim * variant.modalities().len();
        let fusion = FusionHead::new(fusion_in, dims.embed, &mut rng_for(seed, "model/fusion"));
        let encoder = SeqEncoder::new(dims.encoder, &mut rng_for(seed, "model/encoder"))?;
        Ok(XsmoeModel {
            dims,
            variant,
            visual,
            textual,
            fusion,
            encoder,
        })
    }

    pub fn side(&self, m: Modality) -> Option<&SideNetwork> {
        match m {
            Modality::Visual => self.visual.as_ref(),
            Modality::Textual => self.textual.as_ref(),
        }
    }

    pub fn side_mut(&mut self, m: Modality) -> Option<&mut SideNetwork> {
        match m {
            Modality::Visual => self.visual.as_mut(),
            Modality::Textual => self.textual.as_mut(),
        }
    }

    pub fn side_networks(&self) -> impl Iterator<Item = &SideNetwork> {
        self.visual.iter().chain(self.textual.iter())
    }

    pub fn side_networks_mut(&mut self) -> impl Iterator<Item = &mut SideNetwork> {
        self.visual.iter_mut().chain(self.textual.iter_mut())
    }

    /// Item embeddings `[n, d_e]` for a block of items.
    pub fn embed_items(&self, g: &mut Graph, feats: &ItemFeatures<'_>) -> Result<ItemEmbedding> {
        let mut parts = Vec::new();
        let mut side = Vec::new();
        for m in self.variant.modalities() {
            let stack = feats
                .get(m)
                .ok_or_else(|| Error::Data(format!("variant {} needs {m} features", self.variant)))?;
            match self.side(m) {
                Some(net) => {
                    let out = net.forward(g, stack)?;
                    parts.push(out.h);
                    side.push((m, out));
                }
                None => {
                    let last = stack
                        .layers
                        .last()
                        .ok_or_else(|| Error::Data(format!("empty {m} feature stack")))?;
                    parts.push(g.constant(&[stack.rows, stack.dim], last.clone())?);
                }
            }
        }
        let emb = self.fusion.forward(g, &parts)?;
        Ok(ItemEmbedding { emb, side })
    }

    pub fn encode_users<R: Rng + ?Sized>(&self, g: &mut Graph, items: Var, prefixes: &[Vec<usize>], rng: &mut R) -> Result<Var> {
        self.encoder.encode(g, items, prefixes, rng)
    }

    pub fn record_utilization(&mut self, g: &Graph, emb: &ItemEmbedding) -> Result<()> {
        for (m, out) in &emb.side {
            if let Some(net) = self.side_mut(*m) {
                net.record_utilization(g, out)?;
            }
        }
        Ok(())
    }

    pub fn reset_utilization(&mut self) {
        for net in self.side_networks_mut() {
            net.layers.iter_mut().for_each(SideLayer::reset_utilization);
        }
    }

    pub fn expand(&mut self, window: usize) -> Result<()> {
        self.side_networks_mut().try_for_each(|n| n.expand(window))
    }

    pub fn finalize_and_prune(&mut self, tau: f64, include_backbone: bool) -> Result<Vec<(Modality, Vec<LayerPruneOutcome>)>> {
        let mut out = Vec::new();
        for net in self.side_networks_mut() {
            out.push((net.modality, net.finalize_and_prune(tau, include_backbone)?));
        }
        Ok(out)
    }

    pub fn expert_counts(&self) -> Vec<(Modality, Vec<usize>)> {
        self.side_networks().map(|n| (n.modality, n.expert_counts())).collect()
    }

    /// Every parameter tensor in a fixed order: side networks (visual then
    /// textual), fusion head, encoder.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.side_networks().flat_map(SideNetwork::params).collect();
        v.extend(self.fusion.params());
        v.extend(self.encoder.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = Vec::new();
        if let Some(n) = self.visual.as_mut() {
            v.extend(n.params_mut());
        }
        if let Some(n) = self.textual.as_mut() {
            v.extend(n.params_mut());
        }
        v.extend(self.fusion.params_mut());
        v.extend(self.encoder.params_mut());
        v
    }

    /// Side-network parameters only, summed over modalities.
    pub fn side_param_count(&self) -> ParamCount {
        self.side_networks().map(param_counts).sum()
    }

    pub fn model_param_count(&self) -> ParamCount {
        count_tensors(self.params())
    }

    /// FNV-1a digest over every parameter's bit pattern and shape.
    pub fn param_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for t in self.params() {
            for &s in t.shape() {
                eat(&(s as u64).to_le_bytes());
            }
            eat(&t.to_le_bytes());
        }
        h
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|t| t.all_finite())
    }
}
