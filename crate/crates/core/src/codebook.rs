//! Soft quantization: features to code distributions over `K` prototypes via
//! temperature-scaled cosine similarity, and back to expected embeddings.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Guard used when normalizing features and prototypes.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    prototypes: Tensor,
    tau: f64,
}

impl Codebook {
    pub fn new(prototypes: Tensor, tau: f64) -> Result<Self> {
        if prototypes.rank() != 2 || prototypes.shape()[0] < 2 || prototypes.shape()[1] < 1 {
            return Err(Error::InvalidArgument(format!(
                "codebook needs shape [K>=2, D>=1], got {:?}",
                prototypes.shape()
            )));
        }
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
        }
        Ok(Self { prototypes, tau })
    }

    pub fn from_rows(rows: &[Vec<f64>], tau: f64) -> Result<Self> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidArgument("ragged prototype rows".into()));
        }
        Self::new(Tensor::new(vec![rows.len(), d], rows.concat())?, tau)
    }

    pub fn codes(&self) -> usize {
        self.prototypes.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.prototypes.shape()[1]
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    pub fn prototype(&self, k: usize) -> &[f64] {
        self.prototypes.row(k)
    }

    /// Geometric radius `M = max_k ‖c_k‖₂`.
    pub fn radius(&self) -> f64 {
        (0..self.codes()).map(|k| norm(self.prototype(k))).fold(0.0, f64::max)
    }

    /// True when some prototype has (numerically) zero norm and its cosine
    /// similarity is only defined through the epsilon guard.
    pub fn has_degenerate_prototype(&self) -> bool {
        (0..self.codes()).any(|k| norm(self.prototype(k)) < NORM_EPS)
    }
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn normalized(x: &[f64]) -> Vec<f64> {
    let n = norm(x).max(NORM_EPS);
    x.iter().map(|v| v / n).collect()
}

/// `p_k = softmax_k(⟨h̄, c̄_k⟩ / τ)`.
pub fn soft_assign(h: &[f64], cb: &Codebook) -> Result<Vec<f64>> {
    if h.len() != cb.dim() {
        return Err(Error::shape("soft_assign", format!("feature dim {} vs codebook dim {}", h.len(), cb.dim())));
    }
    let hb = normalized(h);
    let logits: Vec<f64> = (0..cb.codes())
        .map(|k| {
            let ck = normalized(cb.prototype(k));
            hb.iter().zip(&ck).map(|(a, b)| a * b).sum::<f64>() / cb.tau
        })
        .collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / s).collect())
}

/// `z(p) = Cᵀp`.
pub fn expected_embedding(p: &[f64], cb: &Codebook) -> Result<Vec<f64>> {
    if p.len() != cb.codes() {
        return Err(Error::shape("expected_embedding", format!("{} weights for {} codes", p.len(), cb.codes())));
    }
    let mut z = vec![0.0; cb.dim()];
    for (k, &pk) in p.iter().enumerate() {
        for (zi, ci) in z.iter_mut().zip(cb.prototype(k)) {
            *zi += pk * ci;
        }
    }
    Ok(z)
}

/// Shannon entropy in nats with `0·log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Mean per-distribution entropy.
pub fn sample_entropy(batch: &[Vec<f64>]) -> f64 {
    batch.iter().map(|p| entropy(p)).sum::<f64>() / batch.len() as f64
}

pub fn mean_distribution(batch: &[Vec<f64>]) -> Vec<f64> {
    let k = batch.first().map(Vec::len).unwrap_or(0);
    let mut m = vec![0.0; k];
    for p in batch {
        for (a, b) in m.iter_mut().zip(p) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|x| *x /= batch.len() as f64);
    m
}

/// Entropy of the batch-mean distribution.
pub fn batch_entropy(batch: &[Vec<f64>]) -> f64 {
    entropy(&mean_distribution(batch))
}

/// `ξ ← ρξ + (1−ρ)θ`, elementwise.
pub fn ema_update(shadow: &mut [f64], online: &[f64], rho: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!("EMA decay must be in [0,1), got {rho}")));
    }
    if shadow.len() != online.len() {
        return Err(Error::shape("ema_update", format!("{} vs {}", shadow.len(), online.len())));
    }
    for (s, o) in shadow.iter_mut().zip(online) {
        *s = rho * *s + (1.0 - rho) * o;
    }
    Ok(())
}

pub fn ema_update_codebook(online: &Codebook, shadow: &mut Codebook, rho: f64) -> Result<()> {
    if online.prototypes.shape() != shadow.prototypes.shape() {
        return Err(Error::shape(
            "ema_update_codebook",
            format!("{:?} vs {:?}", online.prototypes.shape(), shadow.prototypes.shape()),
        ));
    }
    ema_update(shadow.prototypes.data_mut(), online.prototypes.data(), rho)
}

/// Differentiable soft assignment of features `h: [..., D]` against
/// prototypes `c: [K, D]`; returns `(p: [..., K], z: [..., D])`.
pub fn assign_on_tape(tape: &mut Tape, h: Var, c: Var, tau: f64) -> Result<(Var, Var)> {
    let hb = tape.l2_normalize(h, NORM_EPS)?;
    let cb = tape.l2_normalize(c, NORM_EPS)?;
    let ct = tape.transpose(cb)?;
    let sim = tape.matmul(hb, ct)?;
    let p = tape.softmax(sim, tau)?;
    let z = tape.matmul(p, c)?;
    Ok((p, z))
}
