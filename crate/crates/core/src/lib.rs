//! Expandable side mixture-of-experts (XSMoE) for streaming multimodal
//! sequential recommendation.
//!
//! Frozen backbone features are cached per item and per layer. Each
//! modality gets a side network whose layers mix the cached backbone output
//! with a growing set of FFN experts through a softmax router. Every time
//! window appends a fresh expert, freezes the old ones, and prunes the least
//! used expert when its utilization falls below a threshold.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod seqrec;
pub mod stream;

pub use config::{RunConfig, Variant};
pub use error::{CacheError, Error, Result};
pub use model::{Modality, XsmoeModel};
pub use numerics::{Graph, Tensor, Var};
pub use stream::{run_stream, StreamDataset, WindowReport};
