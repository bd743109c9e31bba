//! Loss terms and their weighted composition.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::batch::UnitBatch;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Model};
use crate::rng::Rng;

/// Floor applied to predicted probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub fine: f64,
    pub coarse: f64,
    pub gamma: f64,
    pub emb: f64,
    pub com: f64,
    pub ent_sample: f64,
    pub ent_batch: f64,
    pub rec_start: f64,
    pub rec_end: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            fine: 1.0,
            coarse: 0.5,
            gamma: 0.1,
            emb: 1.0,
            com: 0.25,
            ent_sample: 0.005,
            ent_batch: 0.01,
            rec_start: 0.5,
            rec_end: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.fine,
            self.coarse,
            self.gamma,
            self.emb,
            self.com,
            self.ent_sample,
            self.ent_batch,
            self.rec_start,
            self.rec_end,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Reconstruction weight at 0-based `epoch`, linear from start to end
    /// over `max_epochs`.
    pub fn rec_weight(&self, epoch: usize, max_epochs: usize) -> f64 {
        if max_epochs <= 1 {
            return self.rec_start;
        }
        let frac = (epoch.min(max_epochs - 1)) as f64 / (max_epochs - 1) as f64;
        self.rec_start + (self.rec_end - self.rec_start) * frac
    }
}

/// Every term of the objective. In codebook-bypass mode `kl_fine` is 0,
/// `mse_fine` compares the latent head with EMA features and `kl_coarse`
/// holds the squared error of the coarse latent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub kl_fine: f64,
    pub mse_fine: f64,
    pub kl_coarse: f64,
    pub emb: f64,
    pub com: f64,
    pub ent_sample: f64,
    pub ent_batch: f64,
    pub rec: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const NAMES: [&'static str; 9] = [
        "kl_fine",
        "mse_fine",
        "kl_coarse",
        "emb",
        "com",
        "ent_sample",
        "ent_batch",
        "rec",
        "total",
    ];

    pub fn values(&self) -> [f64; 9] {
        [
            self.kl_fine,
            self.mse_fine,
            self.kl_coarse,
            self.emb,
            self.com,
            self.ent_sample,
            self.ent_batch,
            self.rec,
            self.total,
        ]
    }

    pub fn weighted_total(&self, w: &LossWeights, rec_weight: f64) -> f64 {
        w.fine * (self.kl_fine + w.gamma * self.mse_fine) + w.coarse * self.kl_coarse + w.emb * self.emb
            + w.com * self.com
            + w.ent_sample * self.ent_sample
            - w.ent_batch * self.ent_batch
            + rec_weight * self.rec
    }

    /// Fill `total` from the components.
    pub fn with_total(mut self, w: &LossWeights, rec_weight: f64) -> Self {
        self.total = self.weighted_total(w, rec_weight);
        self
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        Self::NAMES
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }

    pub fn scaled(&self, c: f64) -> Self {
        let v = self.values().map(|x| x * c);
        Self::from_values(v)
    }

    pub fn add(&self, o: &Self) -> Self {
        let (a, b) = (self.values(), o.values());
        Self::from_values(std::array::from_fn(|i| a[i] + b[i]))
    }

    fn from_values(v: [f64; 9]) -> Self {
        Self {
            kl_fine: v[0],
            mse_fine: v[1],
            kl_coarse: v[2],
            emb: v[3],
            com: v[4],
            ent_sample: v[5],
            ent_batch: v[6],
            rec: v[7],
            total: v[8],
        }
    }
}

/// Ablation variants. Each is expressed by skipping terms (which then read 0
/// in the breakdown) or, for the codebook module, by bypassing it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Full,
    NoKl,
    NoReconstruction,
    NoPredictive,
    NoCodebookLoss,
    NoCodebookModule,
    NoDownsample,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoKl,
        Variant::NoReconstruction,
        Variant::NoPredictive,
        Variant::NoCodebookLoss,
        Variant::NoCodebookModule,
        Variant::NoDownsample,
    ];

    pub fn uses_kl(self) -> bool {
        !matches!(self, Variant::NoKl | Variant::NoCodebookModule)
    }

    pub fn uses_reconstruction(self) -> bool {
        self != Variant::NoReconstruction
    }

    pub fn uses_prediction(self) -> bool {
        self != Variant::NoPredictive
    }

    pub fn uses_codebook_loss(self) -> bool {
        !matches!(self, Variant::NoCodebookLoss | Variant::NoCodebookModule)
    }

    pub fn uses_coarse(self) -> bool {
        self != Variant::NoDownsample
    }

    pub fn bypasses_codebook(self) -> bool {
        self == Variant::NoCodebookModule
    }
}

/// `Σ p log(p / max(q, 1e-12))` in nats, with `0·log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(PROB_FLOOR).ln()))
        .sum()
}

/// Summed KL over all rows of `target ‖ pred`. `target` must carry no gradient.
pub fn kl_sum(tape: &mut Tape, target: Var, pred: Var) -> Result<Var> {
    let neg_entropy: f64 = tape
        .value(target)
        .data()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum();
    let q = tape.clamp_min(pred, PROB_FLOOR)?;
    let lq = tape.log(q)?;
    let cross = tape.mul(target, lq)?;
    let cross = tape.sum(cross)?;
    let neg = tape.neg(cross)?;
    tape.add_scalar(neg, neg_entropy)
}

pub fn sq_err_sum(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let s = tape.square(d)?;
    tape.sum(s)
}

/// `(L_emb, L_com)` summed over all rows: `‖sg(z) − h‖²` and `‖z − sg(h)‖²`.
pub fn alignment_losses(tape: &mut Tape, h: Var, z: Var) -> Result<(Var, Var)> {
    let zs = tape.stop_gradient(z)?;
    let hs = tape.stop_gradient(h)?;
    Ok((sq_err_sum(tape, zs, h)?, sq_err_sum(tape, z, hs)?))
}

fn xlogx_sum(tape: &mut Tape, p: Var) -> Result<Var> {
    let c = tape.clamp_min(p, PROB_FLOOR)?;
    let l = tape.log(c)?;
    let m = tape.mul(p, l)?;
    tape.sum(m)
}

/// `(mean_i H(p_i), H(mean_i p_i))` over every row of `p: [..., K]`.
pub fn entropies(tape: &mut Tape, p: Var) -> Result<(Var, Var)> {
    let shape = tape.shape(p).to_vec();
    let k = *shape.last().ok_or_else(|| Error::shape("entropies", "rank 0"))?;
    let rows = crate::tensor::numel(&shape) / k;
    let flat = tape.reshape(p, &[rows, k])?;
    let s = xlogx_sum(tape, flat)?;
    let sample = tape.scale(s, -1.0 / rows as f64)?;
    let mean = tape.mean_axis(flat, 0)?;
    let b = xlogx_sum(tape, mean)?;
    let batch = tape.neg(b)?;
    Ok((sample, batch))
}

/// `Σ ‖x̂ ⊙ σ + μ − x‖²` over all elements: reconstruction error after undoing
/// instance normalization with the context statistics.
pub fn reconstruction_loss(tape: &mut Tape, recon: Var, batch: &UnitBatch) -> Result<Var> {
    let scale = tape.constant(batch.scale.clone());
    let shift = tape.constant(batch.shift.clone());
    let raw = tape.constant(batch.raw_context.clone());
    let den = tape.mul(recon, scale)?;
    let den = tape.add(den, shift)?;
    sq_err_sum(tape, den, raw)
}

pub struct LossInputs<'a> {
    pub model: &'a Model,
    pub online: &'a [Var],
    pub shadow: &'a [Var],
    pub batch: &'a UnitBatch,
    pub weights: &'a LossWeights,
    pub rec_weight: f64,
    pub variant: Variant,
}

/// Forward pass of one training step and the weighted objective. Returns the
/// scalar loss node and every component's value.
pub fn composite_loss(tape: &mut Tape, inp: &LossInputs, dropout: Option<(f64, &mut Rng)>) -> Result<(Var, LossBreakdown)> {
    let model = inp.model;
    let w = inp.weights;
    if model.cfg.bypass_codebook != inp.variant.bypasses_codebook() {
        return Err(Error::Config("codebook bypass must match the ablation variant".into()));
    }
    let n = inp.batch.units as f64;
    let mut terms: Vec<(Var, f64)> = Vec::new();
    let mut br = LossBreakdown::default();

    let mut c = Ctx {
        tape,
        params: inp.online,
        dropout,
    };
    let x = c.tape.constant(inp.batch.context.clone());
    let enc = model.encode_and_assign(&mut c, x)?;

    if inp.variant.uses_codebook_loss() {
        let p = enc.p.expect("codebook active");
        let (emb, com) = alignment_losses(c.tape, enc.h, enc.z)?;
        let emb = c.tape.scale(emb, 1.0 / n)?;
        let com = c.tape.scale(com, 1.0 / n)?;
        let (es, eb) = entropies(c.tape, p)?;
        terms.extend([(emb, w.emb), (com, w.com), (es, w.ent_sample), (eb, -w.ent_batch)]);
        br.emb = c.tape.value(emb).item();
        br.com = c.tape.value(com).item();
        br.ent_sample = c.tape.value(es).item();
        br.ent_batch = c.tape.value(eb).item();
    }

    if inp.variant.uses_reconstruction() {
        let recon = model.decoder.forward(&mut c, enc.z)?;
        let rec = reconstruction_loss(c.tape, recon, inp.batch)?;
        let rec = c.tape.scale(rec, 1.0 / n)?;
        terms.push((rec, inp.rec_weight));
        br.rec = c.tape.value(rec).item();
    }

    if inp.variant.uses_prediction() {
        let codes = enc.p.unwrap_or(enc.h);
        let (p_hat, z_hat) = model.fine.forward(&mut c, codes)?;
        let coarse_pred = if inp.variant.uses_coarse() {
            Some(model.coarse.forward(&mut c, codes)?.0)
        } else {
            None
        };

        let tape = c.tape;
        let mut t = Ctx {
            tape,
            params: inp.shadow,
            dropout: None,
        };
        let xt = t.tape.constant(inp.batch.target_fine.clone());
        let tgt = model.encode_and_assign(&mut t, xt)?;
        let coarse_tgt = if coarse_pred.is_some() {
            let xc = t.tape.constant(inp.batch.target_coarse.clone());
            Some(model.encode_and_assign(&mut t, xc)?)
        } else {
            None
        };
        let tape = t.tape;

        if inp.variant.uses_kl() {
            let pt = tape.stop_gradient(tgt.p.expect("codebook active"))?;
            let kl = kl_sum(tape, pt, p_hat)?;
            let kl = tape.scale(kl, 1.0 / n)?;
            terms.push((kl, w.fine));
            br.kl_fine = tape.value(kl).item();
        }
        let zt = tape.stop_gradient(tgt.z)?;
        let mse = sq_err_sum(tape, zt, z_hat)?;
        let mse = tape.scale(mse, 1.0 / n)?;
        terms.push((mse, w.fine * w.gamma));
        br.mse_fine = tape.value(mse).item();

        if let (Some(pred), Some(tc)) = (coarse_pred, coarse_tgt) {
            let term = match tc.p {
                Some(pc) if inp.variant.uses_kl() => {
                    let pc = tape.stop_gradient(pc)?;
                    Some(kl_sum(tape, pc, pred)?)
                }
                Some(_) => None,
                None => {
                    let hc = tape.stop_gradient(tc.h)?;
                    Some(sq_err_sum(tape, hc, pred)?)
                }
            };
            if let Some(term) = term {
                let term = tape.scale(term, 1.0 / n)?;
                terms.push((term, w.coarse));
                br.kl_coarse = tape.value(term).item();
            }
        }
        return finish(tape, terms, br);
    }
    finish(c.tape, terms, br)
}

fn finish(tape: &mut Tape, terms: Vec<(Var, f64)>, mut br: LossBreakdown) -> Result<(Var, LossBreakdown)> {
    let mut total = tape.constant(crate::tensor::Tensor::scalar(0.0));
    for (v, wt) in terms {
        let s = tape.scale(v, wt)?;
        total = tape.add(total, s)?;
    }
    br.total = tape.value(total).item();
    Ok((total, br))
}
