use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ModelConfig;
use crate::objectives::{LossWeights, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Batch size in units (one variable of one window pair).
    pub batch_size: usize,
    pub grad_clip: f64,
    pub ema_decay: f64,
    pub max_epochs: usize,
    /// Completed-epoch count from which validation selection is active.
    pub selection_start: usize,
    pub patience: usize,
    /// Fraction of the series (chronologically first) used for training.
    pub train_fraction: f64,
    pub stride: usize,
    pub variant: Variant,
    /// Optional default series path.
    pub data: Option<String>,
    pub weights: LossWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            seed: 0,
            lr: 5e-4,
            weight_decay: 1e-5,
            batch_size: 128,
            grad_clip: 0.5,
            ema_decay: 0.996,
            max_epochs: 20,
            selection_start: 10,
            patience: 5,
            train_fraction: 0.9,
            stride: 100,
            variant: Variant::Full,
            data: None,
            weights: LossWeights::default(),
            model: ModelConfig::desk(),
        }
    }

    pub fn paper_default() -> Self {
        Self {
            max_epochs: 100,
            selection_start: 50,
            patience: 10,
            model: ModelConfig::paper_default(),
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper-default" => Ok(Self::paper_default()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or paper-default)"))),
        }
    }

    /// Window length `T_w = P·L`.
    pub fn window(&self) -> usize {
        self.model.window_len()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr must be > 0 and weight_decay >= 0");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.stride == 0 {
            return bad("batch_size, max_epochs and stride must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be > 0");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must be in [0,1)");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must be in (0,1) so that train and validation partition the series");
        }
        if self.model.bypass_codebook != self.variant.bypasses_codebook() {
            return bad("model.bypass_codebook must be true exactly for the no-codebook-module variant");
        }
        Ok(())
    }

    /// Config with the ablation `variant` applied consistently.
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self.model.bypass_codebook = variant.bypasses_codebook();
        self
    }

    pub fn to_toml(&self) -> Result<String> {
        crate::settings::to_toml(self)
    }

    /// Parses a TOML config on top of `base`, then applies `key=value`
    /// overrides; see [`crate::settings::layered`]. Unless `model.bypass_codebook`
    /// is changed explicitly, it follows the variant.
    pub fn from_toml_with(base: &Self, text: &str, overrides: &[String]) -> Result<Self> {
        let mut cfg: Self = crate::settings::layered(base, text, overrides)?;
        if cfg.model.bypass_codebook == base.model.bypass_codebook {
            cfg.model.bypass_codebook = cfg.variant.bypasses_codebook();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
