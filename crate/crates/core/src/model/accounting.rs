//! Parameter accounting for side networks.
//!
//! Experts and routers carry no bias terms, so a layer with `N` experts holds
//! exactly `2Ndd′` expert weights and `(N+1)d` router weights.

use serde::{Deserialize, Serialize};

use super::side::SideNetwork;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
}

impl std::ops::Add for ParamCount {
    type Output = ParamCount;
    fn add(self, o: ParamCount) -> ParamCount {
        ParamCount {
            total: self.total + o.total,
            trainable: self.trainable + o.trainable,
        }
    }
}

impl std::iter::Sum for ParamCount {
    fn sum<I: Iterator<Item = ParamCount>>(iter: I) -> ParamCount {
        iter.fold(ParamCount::default(), |a, b| a + b)
    }
}

/// Walks tensors and counts scalars.
pub fn count_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> ParamCount {
    tensors.into_iter().fold(ParamCount::default(), |acc, t| ParamCount {
        total: acc.total + t.len(),
        trainable: acc.trainable + if t.requires_grad() { t.len() } else { 0 },
    })
}

pub fn param_counts(net: &SideNetwork) -> ParamCount {
    count_tensors(net.params())
}

/// `M(2Ndd′ + Nd + d)`
pub fn closed_form_total(layers: usize, experts: usize, dim: usize, hidden: usize) -> usize {
    layers * (2 * experts * dim * hidden + experts * dim + dim)
}

/// `M(2dd′ + Nd + d)`: one trainable expert plus the router per layer.
pub fn closed_form_trainable(layers: usize, experts: usize, dim: usize, hidden: usize) -> usize {
    layers * (2 * dim * hidden + experts * dim + dim)
}

/// Per-layer generalisation of the closed forms for non-uniform expert
/// counts; `trainable_experts[i]` is the number of unfrozen experts in layer `i`.
pub fn layered_form(expert_counts: &[usize], trainable_experts: &[usize], dim: usize, hidden: usize) -> ParamCount {
    expert_counts
        .iter()
        .zip(trainable_experts)
        .map(|(&n, &t)| ParamCount {
            total: 2 * n * dim * hidden + n * dim + dim,
            trainable: 2 * t * dim * hidden + n * dim + dim,
        })
        .sum()
}
