//! Chronological chunking, per-window training with early stopping,
//! next-chunk evaluation, and window reports.

mod dataset;
mod eval;
mod harness;
mod report;
mod schedule;

pub use dataset::{chunk_stream, train_len, Event, ItemStacks, StreamDataset};
pub use eval::{embed_catalog, evaluate, ndcg_of_rank, rank_of, EvalOutcome, TOP_K};
pub use harness::{run_stream, train_step, StreamObserver, StreamOutcome, StreamRunner, WindowTraining};
pub use report::{parse_report, write_report, AvgReport, ParsedReport, PruneRecord, WindowReport, REPORT_SCHEMA_VERSION};
pub use schedule::{EarlyStopping, WindowSchedule};
