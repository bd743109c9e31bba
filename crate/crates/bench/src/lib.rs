//! Shared fixtures for the benchmarks.

use jepa_core::batch::UnitBatch;
use jepa_core::data::{make_window_pairs, synth_regime_series, SynthConfig};
use jepa_core::trainer::{TrainConfig, TrainState};

/// A fresh desk-preset state and one batch of about `batch_size` units.
pub fn desk_fixture() -> (TrainConfig, TrainState, UnitBatch) {
    let cfg = TrainConfig::desk();
    let state = TrainState::new(&cfg).expect("desk config is valid");
    let series = synth_regime_series(0, 6000, 3, &SynthConfig::default()).expect("synthetic series");
    let pairs = make_window_pairs(&series, cfg.window(), cfg.stride).expect("enough timesteps");
    let refs: Vec<_> = pairs.iter().take(cfg.batch_size / 3).collect();
    let batch = UnitBatch::from_pairs(&refs, cfg.model.patches, cfg.model.patch_len).expect("batch");
    (cfg, state, batch)
}
