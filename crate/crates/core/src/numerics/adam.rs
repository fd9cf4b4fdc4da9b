use std::collections::HashMap;

use super::tensor::{ParamId, Tensor};
use crate::error::{Error, Result};

/// Per-parameter Adam moments.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub first_moment: Vec<f32>,
    pub second_moment: Vec<f32>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Applies one bias-corrected Adam update to `param` using `grad`.
pub fn adam_step(param: &mut Tensor, grad: &[f32], state: &mut AdamState, cfg: &AdamConfig, lr: f32) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    if grad.len() != param.len() || state.first_moment.len() != param.len() {
        return Err(Error::shape(
            "adam_step",
            &[param.shape(), &[grad.len()], &[state.first_moment.len()]],
        ));
    }
    if let Some(pos) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient at index {pos}")));
    }
    if !param.requires_grad() {
        return Ok(());
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - (cfg.beta1 as f64).powi(t);
    let bc2 = 1.0 - (cfg.beta2 as f64).powi(t);
    let step = (lr as f64 / bc1) as f32;
    let bc2_sqrt = bc2.sqrt() as f32;
    let (m, v) = (&mut state.first_moment, &mut state.second_moment);
    for (i, p) in param.data_mut().iter_mut().enumerate() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        *p -= step * m[i] / (v[i].sqrt() / bc2_sqrt + cfg.epsilon);
    }
    Ok(())
}

/// Adam over a changing set of parameters, keyed by tensor identity.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub config: AdamConfig,
    states: HashMap<ParamId, AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            states: HashMap::new(),
        }
    }

    /// Updates every trainable tensor that carries a gradient, then clears
    /// the gradient. Frozen tensors are skipped.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, lr: f32) -> Result<()> {
        for p in params {
            if !p.requires_grad() {
                continue;
            }
            let Some(g) = p.grad().map(<[f32]>::to_vec) else { continue };
            let state = self.states.entry(p.id()).or_insert_with(|| AdamState::new(p.len()));
            if state.first_moment.len() != p.len() {
                *state = AdamState::new(p.len());
            }
            adam_step(p, &g, state, &self.config, lr)?;
            p.zero_grad();
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.states.clear();
    }

    pub fn state(&self, t: &Tensor) -> Option<&AdamState> {
        self.states.get(&t.id())
    }
}
