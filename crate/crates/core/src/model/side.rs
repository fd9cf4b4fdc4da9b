use rand::Rng;

use super::layer::{LayerOutput, SideLayer, Utilization};
use super::Modality;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Cached backbone outputs `l₀…l_D` for a block of items of one modality.
/// `layers[k]` is a row-major `[rows, dim]` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub layers: Vec<Vec<f32>>,
    pub rows: usize,
    pub dim: usize,
}

impl FeatureStack {
    pub fn new(layers: Vec<Vec<f32>>, rows: usize, dim: usize) -> Result<Self> {
        if layers.iter().any(|l| l.len() != rows * dim) {
            return Err(Error::Data(format!(
                "feature stack layers must hold {rows}×{dim} values"
            )));
        }
        Ok(FeatureStack { layers, rows, dim })
    }

    /// Single-item stack from per-layer vectors.
    pub fn single(vectors: &[Vec<f32>]) -> Result<Self> {
        let dim = vectors.first().map_or(0, Vec::len);
        FeatureStack::new(vectors.to_vec(), 1, dim)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

/// Output of a side-network forward: the final `h_M` plus each layer's handles.
#[derive(Clone, Debug)]
pub struct SideOutput {
    pub h: Var,
    pub layers: Vec<LayerOutput>,
}

/// Per-modality stack of `M` side layers. Layer `i` (1-based) reads the
/// backbone output at depth `g·i`.
#[derive(Clone, Debug, PartialEq)]
pub struct SideNetwork {
    pub modality: Modality,
    pub layers: Vec<SideLayer>,
    pub group_factor: usize,
}

/// Per-layer outcome of closing a window.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPruneOutcome {
    pub layer: usize,
    pub utilization: Utilization,
    pub experts_before: usize,
    pub pruned: Option<usize>,
}

impl SideNetwork {
    pub fn new<R: Rng + ?Sized>(
        modality: Modality,
        num_layers: usize,
        dim: usize,
        hidden: usize,
        group_factor: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..num_layers).map(|i| SideLayer::new(dim, hidden, i, rng)).collect();
        SideNetwork {
            modality,
            layers,
            group_factor,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].dim()
    }

    /// Backbone depth (`D+1` vectors) this network expects per item.
    pub fn required_depth(&self) -> usize {
        self.group_factor * self.layers.len() + 1
    }

    pub fn expert_counts(&self) -> Vec<usize> {
        self.layers.iter().map(SideLayer::num_experts).collect()
    }

    pub fn forward(&self, g: &mut Graph, stack: &FeatureStack) -> Result<SideOutput> {
        if stack.depth() != self.required_depth() || stack.dim != self.dim() {
            return Err(Error::Data(format!(
                "{} feature stack has depth {} and width {}, side network needs depth {} (M={}, g={}) and width {}",
                self.modality,
                stack.depth(),
                stack.dim,
                self.required_depth(),
                self.layers.len(),
                self.group_factor,
                self.dim()
            )));
        }
        let shape = [stack.rows, stack.dim];
        let mut h = g.constant(&shape, stack.layers[0].clone())?;
        let mut outs = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let l = g.constant(&shape, stack.layers[self.group_factor * (i + 1)].clone())?;
            let out = layer.forward(g, h, l)?;
            h = out.h;
            outs.push(out);
        }
        Ok(SideOutput { h, layers: outs })
    }

    pub fn record_utilization(&mut self, g: &Graph, out: &SideOutput) -> Result<()> {
        for (layer, lo) in self.layers.iter_mut().zip(&out.layers) {
            layer.record_utilization(g, lo)?;
        }
        Ok(())
    }

    pub fn expand(&mut self, window: usize) -> Result<()> {
        self.layers.iter_mut().try_for_each(|l| l.expand(window))
    }

    /// Finalizes utilization on every layer and applies the pruning rule.
    pub fn finalize_and_prune(&mut self, tau: f64, include_backbone: bool) -> Result<Vec<LayerPruneOutcome>> {
        self.layers
            .iter_mut()
            .enumerate()
            .map(|(i, layer)| {
                let experts_before = layer.num_experts();
                let utilization = layer.finalize_utilization(include_backbone)?;
                let pruned = layer.prune(&utilization.scores, tau)?;
                Ok(LayerPruneOutcome {
                    layer: i,
                    utilization,
                    experts_before,
                    pruned,
                })
            })
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(SideLayer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(SideLayer::params_mut).collect()
    }
}
