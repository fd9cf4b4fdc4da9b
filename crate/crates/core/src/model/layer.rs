use rand::Rng;

use super::expert::ExpertNet;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Dense softmax router over `[backbone, expert_1, …, expert_N]`.
/// Row 0 of `weights` scores the backbone slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Router {
    /// `(N+1) × d`
    pub weights: Tensor,
    pub layer_index: usize,
}

impl Router {
    pub fn new<R: Rng + ?Sized>(experts: usize, dim: usize, layer_index: usize, rng: &mut R) -> Self {
        Router {
            weights: Tensor::randn(&[experts + 1, dim], 0.01, rng).trainable(),
            layer_index,
        }
    }

    pub fn slots(&self) -> usize {
        self.weights.rows()
    }
}

/// Graph handles produced by one layer forward.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub h: Var,
    /// `[n, N+1]` mixture weights, column 0 for the backbone.
    pub alpha: Var,
    /// Expert outputs `z_j`, skip connection included.
    pub experts: Vec<Var>,
    pub backbone: Var,
}

/// Result of closing a utilization window.
#[derive(Clone, Debug, PartialEq)]
pub struct Utilization {
    pub scores: Vec<f64>,
    /// All accumulators were zero; `scores` fell back to uniform.
    pub degenerate: bool,
}

/// One side-network layer: experts, router, and utilization accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct SideLayer {
    pub experts: Vec<ExpertNet>,
    pub router: Router,
    pub util_num: Vec<f64>,
    pub util_backbone: f64,
    pub util_count: u64,
}

impl SideLayer {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, layer_index: usize, rng: &mut R) -> Self {
        let expert = ExpertNet::new(dim, hidden, 0, rng);
        let router = Router::new(1, dim, layer_index, rng);
        SideLayer {
            experts: vec![expert],
            router,
            util_num: vec![0.0],
            util_backbone: 0.0,
            util_count: 0,
        }
    }

    pub fn from_parts(experts: Vec<ExpertNet>, router: Router) -> Result<Self> {
        let layer = SideLayer {
            util_num: vec![0.0; experts.len()],
            experts,
            router,
            util_backbone: 0.0,
            util_count: 0,
        };
        layer.check_structure()?;
        Ok(layer)
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn dim(&self) -> usize {
        self.router.weights.cols()
    }

    pub fn check_structure(&self) -> Result<()> {
        if self.experts.is_empty() {
            return Err(Error::Invariant(format!("layer {} has no experts", self.router.layer_index)));
        }
        if self.router.slots() != self.experts.len() + 1 {
            return Err(Error::Invariant(format!(
                "layer {}: router has {} rows for {} experts",
                self.router.layer_index,
                self.router.slots(),
                self.experts.len()
            )));
        }
        if self.util_num.len() != self.experts.len() {
            return Err(Error::Invariant(format!(
                "layer {}: {} utilization slots for {} experts",
                self.router.layer_index,
                self.util_num.len(),
                self.experts.len()
            )));
        }
        Ok(())
    }

    /// `α = softmax(W·h_prev)`, `h = α₀·l + Σⱼ αⱼ·Eⱼ(h_prev)`, row-wise over a batch.
    pub fn forward(&self, g: &mut Graph, h_prev: Var, backbone: Var) -> Result<LayerOutput> {
        self.check_structure()?;
        if g.shape(h_prev) != g.shape(backbone) {
            return Err(Error::shape("layer_forward", &[g.shape(h_prev), g.shape(backbone)]));
        }
        let w = g.param(&self.router.weights);
        let logits = g.matmul(h_prev, w, true)?;
        let alpha = g.softmax(logits);

        let a0 = g.slice_cols(alpha, 0, 1)?;
        let mut h = g.mul_col(backbone, a0)?;
        let mut outs = Vec::with_capacity(self.experts.len());
        for (j, e) in self.experts.iter().enumerate() {
            let z = e.forward(g, h_prev)?;
            let aj = g.slice_cols(alpha, j + 1, 1)?;
            let term = g.mul_col(z, aj)?;
            h = g.add(h, term)?;
            outs.push(z);
        }
        Ok(LayerOutput {
            h,
            alpha,
            experts: outs,
            backbone,
        })
    }

    /// Adds `‖αⱼ·zⱼ‖₂` for every row of a finished forward.
    pub fn record_utilization(&mut self, g: &Graph, out: &LayerOutput) -> Result<()> {
        let n_slots = self.experts.len() + 1;
        if out.experts.len() + 1 != n_slots {
            return Err(Error::Invariant("utilization from a stale forward".into()));
        }
        let alpha = g.value(out.alpha);
        let rows = alpha.len() / n_slots;
        let dim = self.dim();
        let norm = |v: Var, r: usize| -> f64 {
            g.value(v)[r * dim..(r + 1) * dim]
                .iter()
                .map(|x| (*x as f64) * (*x as f64))
                .sum::<f64>()
                .sqrt()
        };
        for r in 0..rows {
            let a = &alpha[r * n_slots..(r + 1) * n_slots];
            self.util_backbone += a[0] as f64 * norm(out.backbone, r);
            for (j, &z) in out.experts.iter().enumerate() {
                self.util_num[j] += a[j + 1] as f64 * norm(z, r);
            }
        }
        self.util_count += rows as u64;
        Ok(())
    }

    /// `rⱼ = ‖αⱼzⱼ‖ / Σᵢ ‖αᵢzᵢ‖` over the experts (optionally with the
    /// backbone term in the denominator). Resets the accumulators.
    pub fn finalize_utilization(&mut self, include_backbone: bool) -> Result<Utilization> {
        if self.util_count == 0 {
            return Err(Error::Contract(format!(
                "layer {}: utilization finalized without any armed forward",
                self.router.layer_index
            )));
        }
        let n = self.experts.len();
        let mut denom: f64 = self.util_num.iter().sum();
        if include_backbone {
            denom += self.util_backbone;
        }
        let result = if denom > 0.0 && denom.is_finite() {
            Utilization {
                scores: self.util_num.iter().map(|v| v / denom).collect(),
                degenerate: false,
            }
        } else {
            Utilization {
                scores: vec![1.0 / n as f64; n],
                degenerate: true,
            }
        };
        self.reset_utilization();
        Ok(result)
    }

    pub fn reset_utilization(&mut self) {
        self.util_num = vec![0.0; self.experts.len()];
        self.util_backbone = 0.0;
        self.util_count = 0;
    }

    /// Removes the single least-utilized expert if its score is below `tau`
    /// and the layer has more than one expert. Ties go to the lowest index.
    pub fn prune(&mut self, scores: &[f64], tau: f64) -> Result<Option<usize>> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Config(format!("pruning threshold {tau} outside [0, 1]")));
        }
        if scores.len() != self.experts.len() {
            return Err(Error::Invariant(format!(
                "{} utilization scores for {} experts",
                scores.len(),
                self.experts.len()
            )));
        }
        if self.experts.len() <= 1 {
            return Ok(None);
        }
        let (idx, min) = scores
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |best, (i, r)| if r < best.1 { (i, r) } else { best });
        if min >= tau {
            return Ok(None);
        }
        self.experts.remove(idx);
        self.router.weights.remove_row(idx + 1)?;
        self.router.weights.set_requires_grad(true);
        self.util_num.remove(idx);
        self.check_structure()?;
        Ok(Some(idx))
    }

    /// Freezes every expert, appends one initialised to their mean, and
    /// grows the router by a zero row.
    pub fn expand(&mut self, window: usize) -> Result<()> {
        let fresh = ExpertNet::mean_of(&self.experts, window)?;
        for e in &mut self.experts {
            e.set_frozen(true);
        }
        self.experts.push(fresh);
        let zeros = vec![0.0; self.dim()];
        self.router.weights.push_row(&zeros)?;
        self.router.weights.set_requires_grad(true);
        self.util_num.push(0.0);
        self.check_structure()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.experts.iter().flat_map(|e| e.params()).collect();
        v.push(&self.router.weights);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.experts.iter_mut().flat_map(|e| e.params_mut()).collect();
        v.push(&mut self.router.weights);
        v
    }
}
