//! Series ingestion, window pairing, instance normalization and the two
//! resolutions fed to the encoder.

mod series;
mod synth;
mod window;

pub use series::{apply_channel_mask, remove_constant_channels, RawSeries};
pub use synth::{synth_regime_series, SynthConfig};
pub use window::{
    down_avg, make_window_pairs, patchify, revin_denormalize, revin_normalize, CoarseView, FineView, RevinStats,
    Window, WindowPair, REVIN_EPS,
};
