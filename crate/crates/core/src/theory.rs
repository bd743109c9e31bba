//! Runtime certificates for the soft code map: the ℓ1→ℓ2 Lipschitz bound,
//! Pinsker's inequality, the representation-drift bound, the entropy lemmas
//! and the non-collapse variance lower bound.
//!
//! Hypothesis failures are reported as [`Status::NotApplicable`], never as
//! failures: the bounds are conditional.

use serde::{Deserialize, Serialize};

use crate::codebook::{entropy, expected_embedding, mean_distribution, Codebook};
use crate::error::{Error, Result};

/// Slack applied to every comparison.
pub const SLACK: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
    NotApplicable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKind {
    Upper,
    Lower,
}

/// One measured inequality `lhs ≤ rhs` (upper) or `lhs ≥ rhs` (lower).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub kind: BoundKind,
    pub lhs: f64,
    pub rhs: f64,
    /// Distance to the bound in the direction of validity; negative means violated.
    pub margin: f64,
    pub status: Status,
}

impl Check {
    pub fn upper(name: &str, lhs: f64, rhs: f64) -> Self {
        let ok = lhs <= rhs + SLACK;
        Self {
            name: name.into(),
            kind: BoundKind::Upper,
            lhs,
            rhs,
            margin: rhs - lhs,
            status: if ok { Status::Pass } else { Status::Fail },
        }
    }

    pub fn lower(name: &str, lhs: f64, rhs: f64) -> Self {
        let ok = lhs >= rhs - SLACK;
        Self {
            name: name.into(),
            kind: BoundKind::Lower,
            lhs,
            rhs,
            margin: lhs - rhs,
            status: if ok { Status::Pass } else { Status::Fail },
        }
    }

    pub fn not_applicable(name: &str, kind: BoundKind) -> Self {
        Self {
            name: name.into(),
            kind,
            lhs: f64::NAN,
            rhs: f64::NAN,
            margin: f64::NAN,
            status: Status::NotApplicable,
        }
    }

    pub fn passed(&self) -> bool {
        self.status != Status::Fail
    }
}

pub fn l1(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum()
}

pub fn l2(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

/// Exact `D_KL(p ‖ q)` in nats: `+∞` when `q_k = 0 < p_k`.
pub fn kl_exact(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return f64::INFINITY;
            }
            s += a * (a / b).ln();
        }
    }
    s.max(0.0)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

/// `‖z(p) − z(q)‖₂ ≤ M‖p − q‖₁`.
pub fn check_lipschitz(p: &[f64], q: &[f64], cb: &Codebook) -> Result<Check> {
    let zp = expected_embedding(p, cb)?;
    let zq = expected_embedding(q, cb)?;
    Ok(Check::upper("lipschitz", l2(&zp, &zq), cb.radius() * l1(p, q)))
}

/// `‖p − q‖₁ ≤ √(2 D_KL(p‖q))`.
pub fn check_pinsker(p: &[f64], q: &[f64]) -> Check {
    Check::upper("pinsker", l1(p, q), (2.0 * kl_exact(p, q)).sqrt())
}

/// Measured quantities for the drift bound between consecutive predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityInputs {
    pub eps_t: f64,
    pub eps_next: f64,
    pub delta: f64,
    pub radius: f64,
    pub drift: f64,
}

impl StabilityInputs {
    /// `ε_t = D_KL(p_t‖p̂_t)`, `ε_{t+1} = D_KL(p_{t+1}‖p̂_{t+1})`,
    /// `δ_t = ‖p_{t+1} − p_t‖₁` and drift `‖z(p̂_{t+1}) − z(p̂_t)‖₂`.
    pub fn measure(
        pred_t: &[f64],
        pred_next: &[f64],
        target_t: &[f64],
        target_next: &[f64],
        cb: &Codebook,
    ) -> Result<Self> {
        let k = cb.codes();
        if [pred_t, pred_next, target_t, target_next].iter().any(|v| v.len() != k) {
            return Err(Error::shape("stability", format!("distributions must have {k} entries")));
        }
        let zt = expected_embedding(pred_t, cb)?;
        let zn = expected_embedding(pred_next, cb)?;
        Ok(Self {
            eps_t: kl_exact(target_t, pred_t),
            eps_next: kl_exact(target_next, pred_next),
            delta: l1(target_next, target_t),
            radius: cb.radius(),
            drift: l2(&zn, &zt),
        })
    }
}

/// `drift ≤ M(√(2ε_{t+1}) + δ_t + √(2ε_t))`.
pub fn check_stability_bound(s: &StabilityInputs) -> Check {
    let bound = s.radius * ((2.0 * s.eps_next).sqrt() + s.delta + (2.0 * s.eps_t).sqrt());
    Check::upper("stability", s.drift, bound)
}

pub fn binary_entropy(x: f64) -> f64 {
    entropy(&[x, 1.0 - x])
}

/// `φ(ρ) = H_b(ρ) + (1−ρ) log(K−1)`: the largest entropy of a distribution
/// over `K` outcomes whose largest mass is `ρ`.
pub fn phi(rho: f64, k: usize) -> f64 {
    binary_entropy(rho) + (1.0 - rho) * ((k - 1) as f64).ln()
}

/// The root of `φ(ρ) = η` on `[1/K, 1]` by bisection.
pub fn solve_rho_star(eta: f64, k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("K must be >= 2, got {k}")));
    }
    let log_k = (k as f64).ln();
    if !(eta > 0.0) || eta > log_k + SLACK {
        return Err(Error::InvalidArgument(format!("eta {eta} outside (0, log K = {log_k}]")));
    }
    let lo0 = 1.0 / k as f64;
    if eta >= log_k || eta >= phi(lo0, k) {
        return Ok(lo0);
    }
    let (mut lo, mut hi) = (lo0, 1.0);
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let f = phi(mid, k);
        if (f - eta).abs() <= 1e-13 || hi - lo <= 1e-16 {
            break;
        }
        // φ is decreasing: too much entropy means ρ must grow.
        if f > eta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(mid)
}

/// Dominant and secondary codes of a batch marginal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoActive {
    pub m: usize,
    pub r: usize,
    pub rho_star: f64,
    pub beta: f64,
    pub p_max: f64,
    pub p_r: f64,
    /// `p̄_max ≤ ρ*` and `p̄_r ≥ β`, within slack.
    pub holds: bool,
}

/// For a batch with `H(p̄) ≥ η`: `m = argmax p̄`, `r` the largest other index,
/// and whether `p̄_max ≤ ρ*(η)` and `p̄_r ≥ β` hold. `None` when `η` is not
/// admissible or the entropy precondition fails.
pub fn check_two_active_codes(batch: &[Vec<f64>], eta: f64) -> Option<TwoActive> {
    if batch.is_empty() {
        return None;
    }
    let pbar = mean_distribution(batch);
    let k = pbar.len();
    if entropy(&pbar) < eta - SLACK {
        return None;
    }
    let rho_star = solve_rho_star(eta, k).ok()?;
    let beta = (1.0 - rho_star) / (k - 1) as f64;
    let m = argmax(&pbar);
    let r = (0..k)
        .filter(|&i| i != m)
        .fold(None, |best: Option<usize>, i| match best {
            Some(b) if pbar[b] >= pbar[i] => Some(b),
            _ => Some(i),
        })?;
    let holds = pbar[m] <= rho_star + SLACK && pbar[r] >= beta - SLACK;
    Some(TwoActive {
        m,
        r,
        rho_star,
        beta,
        p_max: pbar[m],
        p_r: pbar[r],
        holds,
    })
}

/// `ε = max_i ‖p_i − e_{k(i)}‖₁`.
pub fn sharpness(batch: &[Vec<f64>]) -> f64 {
    batch
        .iter()
        .map(|p| {
            let k = argmax(p);
            p.iter().enumerate().map(|(j, &x)| if j == k { 1.0 - x } else { x.abs() }).sum::<f64>()
        })
        .fold(0.0, f64::max)
}

/// Frequencies of the per-sample dominant codes.
pub fn dominant_frequencies(batch: &[Vec<f64>]) -> Vec<f64> {
    let k = batch.first().map(Vec::len).unwrap_or(0);
    let mut f = vec![0.0; k];
    for p in batch {
        f[argmax(p)] += 1.0 / batch.len() as f64;
    }
    f
}

/// `‖p̄ − π̂‖₁ ≤ ε` and `min_k (π̂_k − p̄_k + ε) ≥ 0`.
pub fn check_freq_transfer(batch: &[Vec<f64>]) -> [Check; 2] {
    let eps = sharpness(batch);
    let pbar = mean_distribution(batch);
    let pi = dominant_frequencies(batch);
    let worst = pi
        .iter()
        .zip(&pbar)
        .map(|(a, b)| a - (b - eps))
        .fold(f64::INFINITY, f64::min);
    [
        Check::upper("freq-transfer-l1", l1(&pbar, &pi), eps),
        Check::lower("freq-transfer-coordinate", worst, 0.0),
    ]
}

/// Population `Tr Cov` as the mean squared distance to the centroid.
pub fn trace_covariance(rows: &[Vec<f64>]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let mean = mean_distribution(rows);
    rows.iter().map(|r| l2(r, &mean).powi(2)).sum::<f64>() / rows.len() as f64
}

/// `½ E‖Z − Z′‖²` over independent uniform draws (all ordered pairs).
pub fn trace_covariance_pairwise(rows: &[Vec<f64>]) -> f64 {
    let b = rows.len() as f64;
    if rows.is_empty() {
        return 0.0;
    }
    let mut s = 0.0;
    for a in rows {
        for c in rows {
            s += l2(a, c).powi(2);
        }
    }
    0.5 * s / (b * b)
}

/// Measured hypotheses of the variance lower bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonCollapseInputs {
    pub eta: f64,
    pub eps: f64,
    pub rho_star: f64,
    pub beta: f64,
    pub alpha: f64,
    pub m: usize,
    pub r: usize,
    pub delta_c: f64,
    pub radius: f64,
    /// `None` if the batch marginal has zero entropy.
    pub two_active: Option<TwoActive>,
}

impl NonCollapseInputs {
    /// Measures `η = H(p̄)`, `ε`, `ρ*`, `β`, `α = max(β − ε, 0)`, `m`, `r`,
    /// and `Δc = ‖c_m − c_r‖` from a batch.
    pub fn measure(batch: &[Vec<f64>], cb: &Codebook) -> Self {
        let eta = entropy(&mean_distribution(batch));
        let eps = sharpness(batch);
        let two = check_two_active_codes(batch, eta);
        let (rho_star, beta, m, r) = match &two {
            Some(t) => (t.rho_star, t.beta, t.m, t.r),
            None => (1.0, 0.0, 0, 0),
        };
        let delta_c = l2(cb.prototype(m), cb.prototype(r));
        Self {
            eta,
            eps,
            rho_star,
            beta,
            alpha: (beta - eps).max(0.0),
            m,
            r,
            delta_c,
            radius: cb.radius(),
            two_active: two,
        }
    }

    pub fn bound(&self) -> f64 {
        self.alpha.powi(2) * (self.delta_c - 2.0 * self.radius * self.eps).powi(2)
    }

    /// Whether the bound's hypotheses hold for the measured values.
    pub fn applicable(&self) -> bool {
        self.two_active.as_ref().is_some_and(|t| t.holds)
            && self.alpha > 0.0
            && 2.0 * self.radius * self.eps < self.delta_c
    }
}

/// `Tr Cov({z_i}) ≥ α²(Δc − 2Mε)²` with `Tr Cov` from the pairwise identity.
pub fn check_variance_lower_bound(batch: &[Vec<f64>], cb: &Codebook) -> Result<(Check, NonCollapseInputs)> {
    let n = NonCollapseInputs::measure(batch, cb);
    if !n.applicable() {
        return Ok((Check::not_applicable("variance-lower-bound", BoundKind::Lower), n));
    }
    let zs = batch
        .iter()
        .map(|p| expected_embedding(p, cb))
        .collect::<Result<Vec<_>>>()?;
    let tr = trace_covariance_pairwise(&zs);
    Ok((Check::lower("variance-lower-bound", tr, n.bound()), n))
}

/// Largest violation of strict decrease of `φ` on an `n`-point grid of `[1/K, 1)`.
pub fn phi_is_strictly_decreasing(k: usize, n: usize) -> bool {
    let lo = 1.0 / k as f64;
    let mut prev = phi(lo, k);
    for i in 1..n {
        let x = lo + (1.0 - lo) * i as f64 / n as f64;
        let f = phi(x, k);
        if f >= prev {
            return false;
        }
        prev = f;
    }
    true
}
