//! Dense `f32` tensors, a reverse-mode tape, and Adam.

mod adam;
mod graph;
pub mod kernels;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{ParamId, Tensor};

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

/// Derives an independent generator for `label` from the run seed, so each
/// subsystem draws from its own stream regardless of call order elsewhere.
pub fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    // FNV-1a over the label, folded into the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17))
}
