//! Interaction logs, cached backbone features, and the synthetic stream generator.

mod cache;
mod interactions;
pub mod synth;

pub use cache::{read_cache, write_cache, FeatureCache, CACHE_HEADER_LEN, CACHE_MAGIC, CACHE_VERSION};
pub use interactions::{load_interactions, sort_chronologically, write_interactions, Interaction, HEADER};
