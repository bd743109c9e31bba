//! Frozen-feature early-warning evaluation.
//!
//! Each example pairs the pooled codes of a context window with the label of
//! the window that follows it. The classifier sees only the training split;
//! the threshold sees only validation scores.

pub mod classifier;
pub mod features;
pub mod metrics;

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use classifier::{sigmoid, train_classifier, Classifier, ClassifierConfig, TrainedClassifier};
pub use features::{extract_features, max_pool_variables};
pub use metrics::{auc, candidate_thresholds, compute_metrics, select_threshold, Confusion, MetricsReport};

use crate::data::{apply_channel_mask, make_window_pairs, RawSeries, Window};
use crate::error::{Error, Result};
use crate::report::{code_usage_by_class, CodeUsageRow};
use crate::rng::{self, Stream};
use crate::trainer::Checkpoint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamConfig {
    pub seed: u64,
    pub stride: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub classifier: ClassifierConfig,
    /// Permute training and validation labels before fitting (null control).
    pub shuffle_labels: bool,
    pub features: FeatureSource,
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.classifier.hidden == 0 || !(self.classifier.lr > 0.0) {
            return Err(Error::Config("stride, classifier.hidden and classifier.lr must be positive".into()));
        }
        let (a, b) = (self.train_fraction, self.val_fraction);
        if !(a > 0.0 && b > 0.0 && a + b < 1.0) {
            return Err(Error::Config(format!("split fractions {a}/{b} must be positive and leave a test share")));
        }
        Ok(())
    }

    pub fn from_toml_with(base: &Self, text: &str, overrides: &[String]) -> Result<Self> {
        let cfg: Self = crate::settings::layered(base, text, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Which frozen encoder and codebook produce the features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    Online,
    #[default]
    Target,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stride: 100,
            train_fraction: 0.6,
            val_fraction: 0.2,
            classifier: ClassifierConfig::default(),
            shuffle_labels: false,
            features: FeatureSource::default(),
        }
    }
}

/// Chronological train / validation / test ranges over `n` examples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalSplit {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl EvalSplit {
    pub fn chronological(n: usize, train_fraction: f64, val_fraction: f64) -> Result<Self> {
        if !(train_fraction > 0.0 && val_fraction > 0.0 && train_fraction + val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split fractions {train_fraction}/{val_fraction} must be positive and leave a test share"
            )));
        }
        let a = (n as f64 * train_fraction).floor() as usize;
        let b = (n as f64 * (train_fraction + val_fraction)).floor() as usize;
        if a == 0 || b == a || b >= n {
            return Err(Error::Data(format!("{n} windows are too few for a three-way split")));
        }
        Ok(Self {
            train: 0..a,
            val: a..b,
            test: b..n,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoreRow {
    pub window_start: usize,
    pub score: f64,
    pub label: u8,
}

#[derive(Clone, Debug)]
pub struct ProtocolOutcome {
    pub metrics: MetricsReport,
    pub split: EvalSplit,
    /// Test-split scores.
    pub scores: Vec<ScoreRow>,
    pub classifier: TrainedClassifier,
    pub val_f1: f64,
    /// Pooled features for every window, in chronological order.
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    /// Dominant-code frequencies by class over all windows (reporting only).
    pub usage: Vec<CodeUsageRow>,
}

pub fn scores_csv(rows: &[ScoreRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

fn permuted(labels: &[u8], seed: u64) -> Vec<u8> {
    use rand::seq::SliceRandom;
    let mut out = labels.to_vec();
    out.shuffle(&mut rng::stream(seed, Stream::LabelShuffle));
    out
}

/// Windows, features, classifier, threshold on validation, metrics on test.
pub fn run_protocol(ck: &Checkpoint, series: &RawSeries, cfg: &DownstreamConfig) -> Result<ProtocolOutcome> {
    cfg.validate()?;
    let series = apply_channel_mask(series, ck.raw_dim, &ck.removed_channels)?;
    if series.labels().is_none() {
        return Err(Error::Data("downstream evaluation needs a label column".into()));
    }
    let model_cfg = &ck.config.model;
    let pairs = make_window_pairs(&series, model_cfg.window_len(), cfg.stride)?;
    let split = EvalSplit::chronological(pairs.len(), cfg.train_fraction, cfg.val_fraction)?;
    let labels: Vec<u8> = pairs.iter().map(|p| p.label.unwrap_or(0)).collect();
    let windows: Vec<&Window> = pairs.iter().map(|p| &p.context).collect();
    let params = match cfg.features {
        FeatureSource::Online => &ck.state.online,
        FeatureSource::Target => &ck.state.shadow,
    };
    let features = extract_features(&ck.state.model, params, &windows)?;

    let fit_labels = if cfg.shuffle_labels {
        permuted(&labels[..split.val.end], cfg.seed)
    } else {
        labels[..split.val.end].to_vec()
    };
    let classifier = train_classifier(
        &features[split.train.clone()],
        &fit_labels[split.train.clone()],
        &cfg.classifier,
        cfg.seed,
    )?;
    let val_scores = classifier.classifier.predict(&features[split.val.clone()])?;
    let val_labels = &fit_labels[split.val.clone()];
    let threshold = select_threshold(&val_scores, val_labels)?;
    let val_f1 = Confusion::at(&val_scores, val_labels, threshold).f1();

    let test_scores = classifier.classifier.predict(&features[split.test.clone()])?;
    let test_labels = &labels[split.test.clone()];
    let metrics = compute_metrics(&test_scores, test_labels, threshold)?;
    let scores = split
        .test
        .clone()
        .zip(&test_scores)
        .map(|(i, &score)| ScoreRow {
            window_start: pairs[i].start,
            score,
            label: labels[i],
        })
        .collect();
    let width = features.first().map_or(0, Vec::len) / model_cfg.patches;
    let usage = code_usage_by_class(&features, &labels, width)?;
    Ok(ProtocolOutcome {
        usage,
        metrics,
        split,
        scores,
        classifier,
        val_f1,
        features,
        labels,
    })
}
