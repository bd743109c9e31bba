//! Randomized certificate suite and model rollouts for the bounds in
//! [`crate::theory`].

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::batch::context_units;
use crate::codebook::{entropy, mean_distribution, Codebook};
use crate::data::{apply_channel_mask, RawSeries, Window};
use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};
use crate::tensor::Tensor;
use crate::theory::{
    check_freq_transfer, check_lipschitz, check_pinsker, check_stability_bound, check_two_active_codes,
    check_variance_lower_bound, phi, solve_rho_star, trace_covariance, trace_covariance_pairwise, BoundKind,
    Check, StabilityInputs, Status,
};
use crate::trainer::Checkpoint;

/// Aggregate of one certificate over many instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateSummary {
    pub name: String,
    pub kind: BoundKind,
    pub trials: usize,
    pub passed: usize,
    pub failed: usize,
    pub not_applicable: usize,
    /// The applicable instance closest to (or furthest past) its bound.
    pub worst: Option<Check>,
}

impl CertificateSummary {
    pub fn new(name: &str, kind: BoundKind) -> Self {
        Self {
            name: name.into(),
            kind,
            trials: 0,
            passed: 0,
            failed: 0,
            not_applicable: 0,
            worst: None,
        }
    }

    pub fn record(&mut self, c: Check) {
        self.trials += 1;
        match c.status {
            Status::Pass => self.passed += 1,
            Status::Fail => self.failed += 1,
            Status::NotApplicable => {
                self.not_applicable += 1;
                return;
            }
        }
        if self.worst.as_ref().is_none_or(|w| c.margin < w.margin) {
            self.worst = Some(c);
        }
    }

    pub fn ok(&self) -> bool {
        self.failed == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub seed: u64,
    pub trials: usize,
    pub certificates: Vec<CertificateSummary>,
    pub all_passed: bool,
}

impl CertificateReport {
    pub fn new(seed: u64, trials: usize, certificates: Vec<CertificateSummary>) -> Self {
        let all_passed = certificates.iter().all(CertificateSummary::ok);
        Self {
            seed,
            trials,
            certificates,
            all_passed,
        }
    }

    pub fn push(&mut self, s: CertificateSummary) {
        self.all_passed &= s.ok();
        self.certificates.push(s);
    }

    pub fn get(&self, name: &str) -> Option<&CertificateSummary> {
        self.certificates.iter().find(|c| c.name == name)
    }

    /// Fixed-width text table, one line per certificate.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<26} {:>7} {:>7} {:>7} {:>5} {:>13}\n",
            "certificate", "trials", "pass", "fail", "n/a", "worst margin"
        );
        for c in &self.certificates {
            let margin = c.worst.as_ref().map_or("-".to_string(), |w| format!("{:.3e}", w.margin));
            out.push_str(&format!(
                "{:<26} {:>7} {:>7} {:>7} {:>5} {:>13}\n",
                c.name, c.trials, c.passed, c.failed, c.not_applicable, margin
            ));
        }
        out
    }
}

/// A random point on the simplex, from near-uniform to nearly one-hot.
/// About one draw in ten has exact zeros.
pub fn random_simplex(r: &mut Rng, k: usize) -> Vec<f64> {
    let scale = r.random_range(0.0..10.0);
    let logits: Vec<f64> = (0..k).map(|_| scale * rng::normal(r)).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    if r.random_bool(0.1) {
        for x in p.iter_mut() {
            if r.random_bool(0.3) {
                *x = 0.0;
            }
        }
        if p.iter().all(|&x| x == 0.0) {
            p[r.random_range(0..k)] = 1.0;
        }
    }
    let s: f64 = p.iter().sum();
    p.iter().map(|x| x / s).collect()
}

pub fn random_codebook(r: &mut Rng, k: usize, d: usize) -> Codebook {
    let scale = r.random_range(0.1..3.0);
    let rows: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| scale * rng::normal(r)).collect()).collect();
    Codebook::from_rows(&rows, 0.1).expect("finite prototypes")
}

/// A batch whose rows are within `s_max` (in ℓ1) of one-hot vectors on a
/// random subset of at least two codes.
pub fn sharp_batch(r: &mut Rng, k: usize, b: usize, s_max: f64) -> Vec<Vec<f64>> {
    let active = r.random_range(2..=k);
    (0..b)
        .map(|i| {
            let dom = if i < active { i } else { r.random_range(0..active) };
            let s = r.random_range(0.0..s_max) / 2.0;
            let u = random_simplex(r, k);
            (0..k)
                .map(|j| (1.0 - s) * f64::from(u8::from(j == dom)) + s * u[j])
                .collect()
        })
        .collect()
}

fn dims(r: &mut Rng) -> (usize, usize) {
    (r.random_range(2..=16), r.random_range(1..=8))
}

/// Every randomized certificate, `trials` instances each, from `seed`.
pub fn run_suite(trials: usize, seed: u64) -> Result<CertificateReport> {
    let mut r = rng::stream(seed, Stream::Certificates);
    let mut sums = vec![
        CertificateSummary::new("lipschitz", BoundKind::Upper),
        CertificateSummary::new("pinsker", BoundKind::Upper),
        CertificateSummary::new("stability", BoundKind::Upper),
        CertificateSummary::new("rho-star", BoundKind::Upper),
        CertificateSummary::new("two-active-max", BoundKind::Upper),
        CertificateSummary::new("two-active-secondary", BoundKind::Lower),
        CertificateSummary::new("freq-transfer-l1", BoundKind::Upper),
        CertificateSummary::new("freq-transfer-coordinate", BoundKind::Lower),
        CertificateSummary::new("variance-lower-bound", BoundKind::Lower),
        CertificateSummary::new("pairwise-identity", BoundKind::Upper),
    ];
    if trials == 0 {
        return Ok(CertificateReport::new(seed, 0, Vec::new()));
    }
    for _ in 0..trials {
        let (k, d) = dims(&mut r);
        let cb = random_codebook(&mut r, k, d);
        let p = random_simplex(&mut r, k);
        let q = random_simplex(&mut r, k);
        sums[0].record(check_lipschitz(&p, &q, &cb)?);
        sums[1].record(check_pinsker(&p, &q));

        let tuple: Vec<Vec<f64>> = (0..4).map(|_| random_simplex(&mut r, k)).collect();
        let s = StabilityInputs::measure(&tuple[0], &tuple[1], &tuple[2], &tuple[3], &cb)?;
        sums[2].record(check_stability_bound(&s));

        let kk = r.random_range(2..=256usize);
        let eta = (kk as f64).ln() * r.random_range(1e-6..=1.0);
        let rho = solve_rho_star(eta, kk)?;
        sums[3].record(Check::upper("rho-star", (phi(rho, kk) - eta).abs(), 0.0));

        let b = r.random_range(1..=64);
        let batch: Vec<Vec<f64>> = (0..b).map(|_| random_simplex(&mut r, k)).collect();
        let eta = entropy(&mean_distribution(&batch));
        match check_two_active_codes(&batch, eta) {
            Some(t) => {
                sums[4].record(Check::upper("two-active-max", t.p_max, t.rho_star));
                sums[5].record(Check::lower("two-active-secondary", t.p_r, t.beta));
            }
            None => {
                sums[4].record(Check::not_applicable("two-active-max", BoundKind::Upper));
                sums[5].record(Check::not_applicable("two-active-secondary", BoundKind::Lower));
            }
        }

        let s_max = r.random_range(0.0..0.5);
        let sharp = sharp_batch(&mut r, k, b.max(2), s_max);
        let [a, c] = check_freq_transfer(&sharp);
        sums[6].record(a);
        sums[7].record(c);

        sums[8].record(constructed_variance_check(&mut r)?);

        let rows: Vec<Vec<f64>> = (0..b).map(|_| (0..d).map(|_| rng::normal(&mut r)).collect()).collect();
        let gap = (trace_covariance(&rows) - trace_covariance_pairwise(&rows)).abs();
        sums[9].record(Check::upper("pairwise-identity", gap, 0.0));
    }
    Ok(CertificateReport::new(seed, trials, sums))
}

/// Draws sharp batches on random codebooks until the non-collapse
/// hypotheses hold, then checks the bound.
pub fn constructed_variance_check(r: &mut Rng) -> Result<Check> {
    for _ in 0..1000 {
        let k = r.random_range(2..=6);
        let d = r.random_range(1..=6);
        let cb = random_codebook(r, k, d);
        let b = r.random_range(8..=64);
        let batch = sharp_batch(r, k, b, 0.05);
        let (check, _) = check_variance_lower_bound(&batch, &cb)?;
        if check.status != Status::NotApplicable {
            return Ok(check);
        }
    }
    Err(Error::InvalidArgument("could not construct a batch meeting the hypotheses".into()))
}

/// Per-window code distributions `[windows][V·P][K]`, chunked.
fn per_window(out: &Tensor, windows: usize) -> Vec<Vec<Vec<f64>>> {
    let rows = out.rows() / windows.max(1);
    (0..windows)
        .map(|w| (0..rows).map(|i| out.row(w * rows + i).to_vec()).collect())
        .collect()
}

/// Drift bound along consecutive non-overlapping windows of `series`.
///
/// For step `s`, the fine predictor reads window `s` and predicts the codes
/// of window `s+1`; the EMA branch encodes window `s+1` as the target. The
/// bound compares steps `s` and `s+1` for every variable and patch, with
/// embeddings taken in the online codebook.
pub fn rollout_stability(ck: &Checkpoint, series: &RawSeries, steps: usize) -> Result<CertificateSummary> {
    let model = &ck.state.model;
    if model.cfg.bypass_codebook {
        return Err(Error::InvalidArgument("rollout needs a model with a codebook".into()));
    }
    let series = apply_channel_mask(series, ck.raw_dim, &ck.removed_channels)?;
    let w = model.cfg.window_len();
    let need = (steps + 2) * w;
    if series.len() < need {
        return Err(Error::Data(format!(
            "{steps} rollout steps need {need} timesteps, series has {}",
            series.len()
        )));
    }
    let dim = series.dim();
    let windows: Vec<Window> = (0..steps + 2)
        .map(|s| Window::new(w, dim, series.values()[s * w * dim..(s + 1) * w * dim].to_vec()))
        .collect::<Result<_>>()?;
    let (p, l) = (model.cfg.patches, model.cfg.patch_len);
    let mut preds = Vec::with_capacity(steps + 1);
    let mut targets = Vec::with_capacity(steps + 1);
    const CHUNK: usize = 64;
    let contexts: Vec<&Window> = windows[..steps + 1].iter().collect();
    let futures: Vec<&Window> = windows[1..].iter().collect();
    for (c, f) in contexts.chunks(CHUNK).zip(futures.chunks(CHUNK)) {
        let (p_hat, _, _) = model.infer_predictions(&ck.state.online, &context_units(c, p, l)?)?;
        preds.extend(per_window(&p_hat, c.len()));
        let t = model.infer_codes(&ck.state.shadow, &context_units(f, p, l)?)?;
        let t = t.p.ok_or_else(|| Error::InvalidArgument("target branch has no codebook".into()))?;
        targets.extend(per_window(&t, f.len()));
    }
    let cb = Codebook::new(ck.state.online.get(model.codebook).clone(), model.cfg.tau)?;
    let mut sum = CertificateSummary::new("stability-rollout", BoundKind::Upper);
    for s in 0..steps {
        for i in 0..preds[s].len() {
            let m = StabilityInputs::measure(&preds[s][i], &preds[s + 1][i], &targets[s][i], &targets[s + 1][i], &cb)?;
            sum.record(check_stability_bound(&m));
        }
    }
    Ok(sum)
}
