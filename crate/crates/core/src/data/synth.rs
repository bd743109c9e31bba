//! Synthetic regime-switching series with labeled anomalies and precursors.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::series::RawSeries;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Target fraction of labeled timesteps.
    pub anomaly_rate: f64,
    pub anomaly_len_min: usize,
    pub anomaly_len_max: usize,
    /// Length of the oscillating segment that precedes every anomaly.
    pub precursor_len: usize,
    pub precursor_amplitude: f64,
    pub precursor_period: f64,
    pub ar_coef: f64,
    pub noise_std: f64,
    pub season_amplitude: f64,
    pub season_period: f64,
    pub shift_size: f64,
    pub burst_factor: f64,
    pub drift_size: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            anomaly_rate: 0.1,
            anomaly_len_min: 60,
            anomaly_len_max: 140,
            precursor_len: 150,
            precursor_amplitude: 1.0,
            precursor_period: 6.0,
            ar_coef: 0.8,
            noise_std: 0.3,
            season_amplitude: 1.0,
            season_period: 48.0,
            shift_size: 3.0,
            burst_factor: 4.0,
            drift_size: 4.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    LevelShift,
    VarianceBurst,
    Drift,
}

/// Deterministic in `seed`. Normal behaviour is per-variable AR(1) noise on
/// top of a sinusoid; each anomaly interval is preceded by `precursor_len`
/// points of a fast oscillation and then applies a level shift, a variance
/// burst or a slow drift to every variable.
pub fn synth_regime_series(seed: u64, len: usize, dim: usize, cfg: &SynthConfig) -> Result<RawSeries> {
    if dim == 0 {
        return Err(Error::InvalidArgument("synthetic series needs at least one variable".into()));
    }
    if !(0.0..1.0).contains(&cfg.anomaly_rate) {
        return Err(Error::InvalidArgument(format!("anomaly rate {} not in [0,1)", cfg.anomaly_rate)));
    }
    if cfg.anomaly_len_min == 0 || cfg.anomaly_len_min > cfg.anomaly_len_max {
        return Err(Error::InvalidArgument("bad anomaly length range".into()));
    }
    let mut r = rng::stream(seed, Stream::Synth);

    // Intervals first so the noise stream below does not depend on them.
    let mut events: Vec<(usize, usize, Kind)> = Vec::new();
    if cfg.anomaly_rate > 0.0 {
        let mean_len = (cfg.anomaly_len_min + cfg.anomaly_len_max) as f64 / 2.0;
        let mean_gap = (mean_len / cfg.anomaly_rate - mean_len).max(cfg.precursor_len as f64);
        let mut cursor = 0usize;
        loop {
            let gap = (mean_gap * r.random_range(0.5..1.5)).round() as usize;
            let start = cursor + gap.max(cfg.precursor_len);
            if start >= len {
                break;
            }
            let alen = r.random_range(cfg.anomaly_len_min..=cfg.anomaly_len_max);
            let kind = match r.random_range(0..3) {
                0 => Kind::LevelShift,
                1 => Kind::VarianceBurst,
                _ => Kind::Drift,
            };
            let end = (start + alen).min(len);
            events.push((start, end, kind));
            cursor = end;
        }
    }

    let phases: Vec<f64> = (0..dim).map(|_| r.random_range(0.0..std::f64::consts::TAU)).collect();
    let periods: Vec<f64> = (0..dim).map(|v| cfg.season_period * (1.0 + 0.37 * v as f64)).collect();
    let offsets: Vec<f64> = (0..dim).map(|_| r.random_range(-2.0..2.0)).collect();

    let mut labels = vec![0u8; len];
    let mut noise_scale = vec![1.0; len];
    let mut additive = vec![0.0; len];
    for &(start, end, kind) in &events {
        let pstart = start.saturating_sub(cfg.precursor_len);
        for (t, a) in additive.iter_mut().enumerate().take(start).skip(pstart) {
            let phase = std::f64::consts::TAU * (t - pstart) as f64 / cfg.precursor_period;
            *a += cfg.precursor_amplitude * phase.sin();
        }
        for t in start..end {
            labels[t] = 1;
            match kind {
                Kind::LevelShift => additive[t] += cfg.shift_size,
                Kind::VarianceBurst => noise_scale[t] = cfg.burst_factor,
                Kind::Drift => additive[t] += cfg.drift_size * (t - start + 1) as f64 / (end - start) as f64,
            }
        }
    }

    let mut values = vec![0.0; len * dim];
    let innovation = cfg.noise_std * (1.0 - cfg.ar_coef * cfg.ar_coef).max(0.0).sqrt();
    for v in 0..dim {
        let mut ar = 0.0;
        for t in 0..len {
            ar = cfg.ar_coef * ar + innovation * rng::normal(&mut r);
            let season = cfg.season_amplitude * (std::f64::consts::TAU * t as f64 / periods[v] + phases[v]).sin();
            values[t * dim + v] = offsets[v] + season + noise_scale[t] * ar + additive[t];
        }
    }
    RawSeries::unnamed(values, dim, Some(labels))
}
