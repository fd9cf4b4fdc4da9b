//! Sequence encoding, dot-product scoring, and the training objective.

mod encoder;
mod loss;
mod popularity;

pub use encoder::{Block, EncoderConfig, LayerNorm, Linear, SeqEncoder};
pub use loss::{batch_loss, score, InBatchCandidates};
pub use popularity::PopularityTable;
