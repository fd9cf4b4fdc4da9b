//! Shared fixtures for the benchmarks.

use xsmoe_core::data::synth::{synthesize, SynthConfig, SyntheticWorld};
use xsmoe_core::{RunConfig, StreamDataset};

/// A small synthetic stream, large enough that per-batch costs dominate.
pub fn bench_world(chunks: usize) -> (SyntheticWorld, RunConfig) {
    let world = synthesize(&SynthConfig {
        seed: 17,
        users: 400,
        items: 150,
        windows: chunks,
        interactions_per_window: 600,
        ..SynthConfig::default()
    })
    .expect("synthetic world");
    let cfg = RunConfig {
        chunks,
        max_epochs: 2,
        timing: false,
        ..RunConfig::default()
    };
    (world, cfg)
}

pub fn dataset(world: &SyntheticWorld, cfg: &RunConfig) -> StreamDataset {
    StreamDataset::new(world.interactions.clone(), cfg.chunks, Some(&world.visual), Some(&world.textual)).expect("dataset")
}
