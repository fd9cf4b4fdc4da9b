use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Fully-connected fusion `e = W·[e_v; e_t] + b`. Single-modality variants
/// use a head whose input width is `d` instead of `2d`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionHead {
    /// `d_e × in`
    pub fc: Tensor,
    pub bias: Tensor,
}

impl FusionHead {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        FusionHead {
            fc: Tensor::randn(&[output, input], 1.0 / (input as f32).sqrt(), rng).trainable(),
            bias: Tensor::zeros(&[output]).trainable(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.fc.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.fc.rows()
    }

    /// Concatenates the modality embeddings (each `[n, d]`) and projects.
    pub fn forward(&self, g: &mut Graph, parts: &[Var]) -> Result<Var> {
        let x = match parts {
            [single] => *single,
            many => g.concat_cols(many)?,
        };
        let xs = g.shape(x);
        if xs.len() != 2 || xs[1] != self.input_dim() {
            return Err(Error::shape("fuse", &[xs, self.fc.shape()]));
        }
        let w = g.param(&self.fc);
        let b = g.param(&self.bias);
        let y = g.matmul(x, w, true)?;
        g.add_bias(y, b)
    }

    pub fn params(&self) -> [&Tensor; 2] {
        [&self.fc, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.fc, &mut self.bias]
    }
}
