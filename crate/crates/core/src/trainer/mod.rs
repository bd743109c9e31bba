//! Pre-training: batched optimization, EMA targets, validation-based model
//! selection, checkpoints and collapse diagnostics.

mod checkpoint;
mod config;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::TrainConfig;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::batch::UnitBatch;
use crate::codebook::ema_update;
use crate::data::{make_window_pairs, remove_constant_channels, RawSeries, WindowPair};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Model, ParamStore};
use crate::objectives::{composite_loss, LossBreakdown, LossInputs};
use crate::optim::{clip_global_norm, global_norm, Adam};
use crate::rng::{self, Rng, Stream};
use crate::tensor::Tensor;

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub online: ParamStore,
    /// EMA copy of the encoder and codebook (the first `model.shadow_len()` online entries).
    pub shadow: ParamStore,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub dropout_rng: Rng,
    pub shuffle_rng: Rng,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = rng::stream(cfg.seed, Stream::Init);
        let (model, online) = Model::new(&cfg.model, &mut init)?;
        let shadow = online.prefix(model.shadow_len());
        let adam = Adam::new(online.values(), cfg.lr, cfg.weight_decay);
        Ok(Self {
            model,
            online,
            shadow,
            adam,
            epoch: 0,
            step: 0,
            dropout_rng: rng::stream(cfg.seed, Stream::Dropout),
            shuffle_rng: rng::stream(cfg.seed, Stream::Shuffle),
        })
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    /// Largest absolute gradient that reached any EMA parameter (must be 0).
    pub shadow_grad_max: f64,
}

/// Forward, backward, clipped Adam update of the online parameters, then the
/// EMA update of the shadow encoder and codebook.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, batch: &UnitBatch) -> Result<StepReport> {
    if batch.units == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    let rec_weight = cfg.weights.rec_weight(state.epoch, cfg.max_epochs);
    let mut tape = Tape::new();
    let online = state.online.bind(&mut tape);
    let shadow = state.shadow.bind(&mut tape);
    let inputs = LossInputs {
        model: &state.model,
        online: &online,
        shadow: &shadow,
        batch,
        weights: &cfg.weights,
        rec_weight,
        variant: cfg.variant,
    };
    let dropout = Some((cfg.model.dropout, &mut state.dropout_rng));
    let (loss, breakdown) = composite_loss(&mut tape, &inputs, dropout).map_err(|e| match e {
        Error::NonFinite { op } => Error::NonFiniteLoss {
            component: op,
            epoch: state.epoch,
            step: state.step as usize,
        },
        other => other,
    })?;
    if let Some(component) = breakdown.non_finite() {
        return Err(Error::NonFiniteLoss {
            component,
            epoch: state.epoch,
            step: state.step as usize,
        });
    }
    let grads = tape.backward(loss)?;
    let shadow_grad_max = shadow
        .iter()
        .filter_map(|v| grads.get(*v))
        .flat_map(|g| g.data().iter().map(|x| x.abs()))
        .fold(0.0, f64::max);
    let mut g: Vec<Tensor> = online
        .iter()
        .zip(state.online.values())
        .map(|(v, p)| grads.get_or_zeros(*v, p.shape()))
        .collect();
    let grad_norm = clip_global_norm(&mut g, cfg.grad_clip);
    let clipped_norm = global_norm(&g);
    state.adam.update(state.online.values_mut(), &g)?;
    ema_step(&state.online, &mut state.shadow, cfg.ema_decay)?;
    state.step += 1;
    Ok(StepReport {
        loss: breakdown,
        grad_norm,
        clipped_norm,
        shadow_grad_max,
    })
}

/// `ξ ← ρξ + (1−ρ)θ` for every shadow entry against the matching online entry.
pub fn ema_step(online: &ParamStore, shadow: &mut ParamStore, rho: f64) -> Result<()> {
    for (i, s) in shadow.values_mut().iter_mut().enumerate() {
        let o = &online.values()[i];
        if o.shape() != s.shape() {
            return Err(Error::shape("ema_step", format!("{:?} vs {:?}", s.shape(), o.shape())));
        }
        ema_update(s.data_mut(), o.data(), rho)?;
    }
    Ok(())
}

/// Unit-weighted mean loss over `batches` in eval mode (no dropout, no tape).
pub fn evaluate(state: &TrainState, cfg: &TrainConfig, batches: &[UnitBatch]) -> Result<LossBreakdown> {
    let rec_weight = cfg.weights.rec_weight(state.epoch, cfg.max_epochs);
    let mut acc = LossBreakdown::default();
    let mut units = 0usize;
    for b in batches {
        let mut tape = Tape::inference();
        let online = state.online.bind(&mut tape);
        let shadow = state.shadow.bind(&mut tape);
        let inputs = LossInputs {
            model: &state.model,
            online: &online,
            shadow: &shadow,
            batch: b,
            weights: &cfg.weights,
            rec_weight,
            variant: cfg.variant,
        };
        let (_, br) = composite_loss(&mut tape, &inputs, None)?;
        acc = acc.add(&br.scaled(b.units as f64));
        units += b.units;
    }
    if units == 0 {
        return Err(Error::Data("no validation units".into()));
    }
    Ok(acc.scaled(1.0 / units as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    /// Selection is not active yet.
    Warmup,
    Improved,
    NoImprovement,
    Stop,
}

/// Validation-loss model selection with patience.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub selection_start: usize,
    pub patience: usize,
    pub best: Option<(usize, f64)>,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(selection_start: usize, patience: usize) -> Self {
        Self {
            selection_start,
            patience,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Record the validation loss after `completed` epochs.
    pub fn observe(&mut self, completed: usize, val: f64) -> Selection {
        if completed < self.selection_start {
            return Selection::Warmup;
        }
        match self.best {
            Some((_, b)) if val >= b => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience {
                    Selection::Stop
                } else {
                    Selection::NoImprovement
                }
            }
            _ => {
                self.best = Some((completed, val));
                self.bad_epochs = 0;
                Selection::Improved
            }
        }
    }
}

/// One training-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub loss: LossBreakdown,
    /// Set on the last step of each epoch.
    pub val_total: Option<f64>,
}

pub fn log_csv(rows: &[LogRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["epoch", "step"];
    header.extend(LossBreakdown::NAMES);
    header.push("val_total");
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.epoch.to_string(), r.step.to_string()];
        rec.extend(r.loss.values().iter().map(|v| v.to_string()));
        rec.push(r.val_total.map(|v| v.to_string()).unwrap_or_default());
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

/// Pre-training data: chronological split, constant-channel removal fitted on
/// the training part, and window pairs for each part.
#[derive(Clone, Debug)]
pub struct PretrainData {
    pub train: Vec<WindowPair>,
    pub val: Vec<WindowPair>,
    pub removed_channels: Vec<usize>,
    pub raw_dim: usize,
}

impl PretrainData {
    pub fn prepare(series: &RawSeries, cfg: &TrainConfig) -> Result<Self> {
        let cut = (series.len() as f64 * cfg.train_fraction).round() as usize;
        let train = series.slice_time(0, cut)?;
        let val = series.slice_time(cut, series.len())?;
        let (train, others, removed) = remove_constant_channels(&train, &[val])?;
        let w = cfg.window();
        let train_pairs = make_window_pairs(&train, w, cfg.stride)
            .map_err(|e| Error::Data(format!("training split: {e}")))?;
        let val_pairs = make_window_pairs(&others[0], w, cfg.stride)
            .map_err(|e| Error::Data(format!("validation split: {e}")))?;
        Ok(Self {
            train: train_pairs,
            val: val_pairs,
            removed_channels: removed,
            raw_dim: series.dim(),
        })
    }
}

/// Groups pairs into batches of about `batch_size` units.
pub fn make_batches(pairs: &[&WindowPair], cfg: &TrainConfig) -> Result<Vec<UnitBatch>> {
    let dim = pairs.first().map(|p| p.context.dim).unwrap_or(1).max(1);
    let per = (cfg.batch_size / dim).max(1);
    pairs
        .chunks(per)
        .map(|c| UnitBatch::from_pairs(c, cfg.model.patches, cfg.model.patch_len))
        .collect()
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Selected state (best validation loss once selection is active,
    /// otherwise the last state).
    pub state: TrainState,
    pub log: Vec<LogRow>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

/// The outer training loop. `on_epoch` sees `(completed_epochs, train_mean, val)`.
pub fn fit(
    cfg: &TrainConfig,
    data: &PretrainData,
    mut on_epoch: impl FnMut(usize, &LossBreakdown, &LossBreakdown),
) -> Result<FitOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Data("training and validation splits must be non-empty".into()));
    }
    let mut state = TrainState::new(cfg)?;
    let val_refs: Vec<&WindowPair> = data.val.iter().collect();
    let val_batches = make_batches(&val_refs, cfg)?;
    let mut stopper = EarlyStopping::new(cfg.selection_start, cfg.patience);
    let mut best: Option<TrainState> = None;
    let mut log = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    while state.epoch < cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut state.shuffle_rng);
        let refs: Vec<&WindowPair> = order.iter().map(|&i| &data.train[i]).collect();
        let batches = make_batches(&refs, cfg)?;
        let mut epoch_sum = LossBreakdown::default();
        let mut epoch_units = 0usize;
        for b in &batches {
            let r = train_step(&mut state, cfg, b)?;
            epoch_sum = epoch_sum.add(&r.loss.scaled(b.units as f64));
            epoch_units += b.units;
            log.push(LogRow {
                epoch: state.epoch,
                step: state.step,
                loss: r.loss,
                val_total: None,
            });
        }
        let val = evaluate(&state, cfg, &val_batches)?;
        if let Some(last) = log.last_mut() {
            last.val_total = Some(val.total);
        }
        state.epoch += 1;
        on_epoch(state.epoch, &epoch_sum.scaled(1.0 / epoch_units as f64), &val);
        match stopper.observe(state.epoch, val.total) {
            Selection::Improved => best = Some(state.clone()),
            Selection::Stop => {
                stopped_early = true;
                break;
            }
            Selection::Warmup | Selection::NoImprovement => {}
        }
    }
    let epochs_run = state.epoch;
    let (state, best_epoch) = match (best, stopper.best) {
        (Some(s), Some((e, _))) => (s, e),
        _ => (state, epochs_run),
    };
    Ok(FitOutcome {
        state,
        log,
        best_epoch,
        epochs_run,
        stopped_early,
    })
}

/// Collapse diagnostics on a batch of context windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Population covariance trace of the embeddings (soft embeddings `z`,
    /// or encoder features when the codebook is bypassed).
    pub trace_cov: f64,
    /// `trace_cov / E‖z‖²`, comparable across embedding scales.
    pub relative_variance: f64,
    /// Entropy of the mean code distribution (0 when bypassed).
    pub batch_entropy: f64,
    /// Fraction of rows whose most likely code is `k`.
    pub usage: Vec<f64>,
}

pub fn collapse_monitor(state: &TrainState, context: &Tensor) -> Result<Diagnostics> {
    let mut tape = Tape::inference();
    let online = state.online.bind(&mut tape);
    let mut c = Ctx {
        tape: &mut tape,
        params: &online,
        dropout: None,
    };
    let x = c.tape.constant(context.clone());
    let enc = state.model.encode_and_assign(&mut c, x)?;
    let z = tape.value(enc.z);
    let rows: Vec<Vec<f64>> = (0..z.rows()).map(|i| z.row(i).to_vec()).collect();
    let trace_cov = crate::theory::trace_covariance(&rows);
    let second: f64 = rows.iter().map(|r| r.iter().map(|x| x * x).sum::<f64>()).sum::<f64>() / rows.len() as f64;
    let relative_variance = if second > 0.0 { trace_cov / second } else { 0.0 };
    let (batch_entropy, usage) = match enc.p {
        Some(p) => {
            let p = tape.value(p);
            let dists: Vec<Vec<f64>> = (0..p.rows()).map(|i| p.row(i).to_vec()).collect();
            (crate::codebook::batch_entropy(&dists), code_usage(&dists))
        }
        None => (0.0, Vec::new()),
    };
    Ok(Diagnostics {
        trace_cov,
        relative_variance,
        batch_entropy,
        usage,
    })
}

/// Argmax frequencies (lowest index wins ties), summing to 1.
pub fn code_usage(dists: &[Vec<f64>]) -> Vec<f64> {
    let k = dists.first().map(Vec::len).unwrap_or(0);
    let mut counts = vec![0.0; k];
    for p in dists {
        counts[crate::theory::argmax(p)] += 1.0;
    }
    counts.iter_mut().for_each(|c| *c /= dists.len() as f64);
    counts
}
