//! Shared fixtures for the criterion benchmarks in `benches/`.

use pesd::synth::{generate, SynthSpec};
use pesd::{ModelConfig, SeriesDataset, WindowBatch, WindowSet};

/// A seven-channel hourly series long enough for `L = 96` windows.
pub fn dataset() -> SeriesDataset {
    generate(&SynthSpec::linear_trend(7, 2000, 0.1, 0)).expect("valid spec").dataset
}

/// Desk-scale model: `L = 96`, `O = 24`, `D = 32`, `H = 4`.
pub fn config(ds: &SeriesDataset) -> ModelConfig {
    let mut m = ModelConfig::for_series(ds, 96, 24);
    m.d_model = 32;
    m.heads = 4;
    m
}

pub fn batch(ds: &SeriesDataset, cfg: &ModelConfig, size: usize) -> WindowBatch {
    let set = WindowSet::new(ds, 0..ds.len(), cfg.lookback, cfg.horizon, 1).expect("windows fit");
    let idx: Vec<usize> = (0..size).collect();
    set.batch(&idx).expect("batch")
}
