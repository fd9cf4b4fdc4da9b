use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Bottleneck FFN with a skip connection:
/// `E(h) = W_up · GELU(W_down · h) + h`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertNet {
    /// `d′ × d`
    pub w_down: Tensor,
    /// `d × d′`
    pub w_up: Tensor,
    pub frozen: bool,
    /// Window in which the expert was created (0 = warm-up).
    pub birth_window: usize,
}

impl ExpertNet {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, birth_window: usize, rng: &mut R) -> Self {
        let w_down = Tensor::randn(&[hidden, dim], 1.0 / (dim as f32).sqrt(), rng).trainable();
        let w_up = Tensor::randn(&[dim, hidden], 0.1 / (hidden as f32).sqrt(), rng).trainable();
        ExpertNet {
            w_down,
            w_up,
            frozen: false,
            birth_window,
        }
    }

    pub fn from_weights(w_down: Tensor, w_up: Tensor, frozen: bool, birth_window: usize) -> Result<Self> {
        let (ds, us) = (w_down.shape(), w_up.shape());
        if ds.len() != 2 || us.len() != 2 || ds[0] != us[1] || ds[1] != us[0] {
            return Err(Error::shape("expert", &[ds, us]));
        }
        let mut e = ExpertNet {
            w_down,
            w_up,
            frozen: false,
            birth_window,
        };
        e.set_frozen(frozen);
        Ok(e)
    }

    /// Element-wise mean of the given experts' weights, as a new trainable expert.
    pub fn mean_of(experts: &[ExpertNet], birth_window: usize) -> Result<Self> {
        let Some(first) = experts.first() else {
            return Err(Error::Contract("mean of zero experts".into()));
        };
        let k = experts.len() as f64;
        let avg = |pick: fn(&ExpertNet) -> &Tensor| -> Result<Tensor> {
            let shape = pick(first).shape().to_vec();
            let mut acc = vec![0.0f64; pick(first).len()];
            for e in experts {
                let t = pick(e);
                if t.shape() != shape.as_slice() {
                    return Err(Error::shape("expert mean", &[&shape, t.shape()]));
                }
                acc.iter_mut().zip(t.data()).for_each(|(a, v)| *a += *v as f64);
            }
            Tensor::from_vec(&shape, acc.into_iter().map(|v| (v / k) as f32).collect())
        };
        ExpertNet::from_weights(avg(|e| &e.w_down)?, avg(|e| &e.w_up)?, false, birth_window)
    }

    pub fn dim(&self) -> usize {
        self.w_down.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w_down.shape()[0]
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        self.w_down.set_requires_grad(!frozen);
        self.w_up.set_requires_grad(!frozen);
    }

    /// Applies the expert row-wise to `h` (`[n, d]`).
    pub fn forward(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let hs = g.shape(h);
        if hs.len() != 2 || hs[1] != self.dim() {
            return Err(Error::shape("expert_forward", &[hs, self.w_down.shape()]));
        }
        let wd = g.param(&self.w_down);
        let wu = g.param(&self.w_up);
        let down = g.matmul(h, wd, true)?;
        let act = g.gelu(down);
        let up = g.matmul(act, wu, true)?;
        g.add(up, h)
    }

    pub fn params(&self) -> [&Tensor; 2] {
        [&self.w_down, &self.w_up]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.w_down, &mut self.w_up]
    }

    pub fn param_count(&self) -> usize {
        self.w_down.len() + self.w_up.len()
    }
}
