//! Folding window pairs into per-variable training units.
//!
//! A unit is one variable of one window pair. Variables share all
//! parameters and never interact, so a batch of `B` pairs over `V` variables
//! is `B·V` independent univariate sequences.

use crate::data::{down_avg, patchify, revin_normalize, Window, WindowPair};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct UnitBatch {
    pub units: usize,
    /// Normalized context patches `[N, P, L]`.
    pub context: Tensor,
    /// Normalized target patches `[N, P, L]`.
    pub target_fine: Tensor,
    /// Down-averaged normalized target `[N, 1, L]`.
    pub target_coarse: Tensor,
    /// Raw context patches `[N, P, L]`.
    pub raw_context: Tensor,
    /// Context std and mean broadcast to `[N, P, L]`, for denormalization.
    pub scale: Tensor,
    pub shift: Tensor,
}

fn check(w: &Window, patches: usize, patch_len: usize) -> Result<()> {
    if w.len != patches * patch_len {
        return Err(Error::Data(format!(
            "window length {} does not match {patches} patches of {patch_len}",
            w.len
        )));
    }
    Ok(())
}

impl UnitBatch {
    pub fn from_pairs(pairs: &[&WindowPair], patches: usize, patch_len: usize) -> Result<Self> {
        let first = pairs.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        let dim = first.context.dim;
        let n = pairs.len() * dim;
        let pl = patches * patch_len;
        let mut context = Vec::with_capacity(n * pl);
        let mut target_fine = Vec::with_capacity(n * pl);
        let mut target_coarse = Vec::with_capacity(n * patch_len);
        let mut raw = Vec::with_capacity(n * pl);
        let mut scale = Vec::with_capacity(n * pl);
        let mut shift = Vec::with_capacity(n * pl);
        for pair in pairs {
            check(&pair.context, patches, patch_len)?;
            check(&pair.target, patches, patch_len)?;
            if pair.context.dim != dim || pair.target.dim != dim {
                return Err(Error::Data("pairs in one batch must share the variable count".into()));
            }
            let (cn, stats) = revin_normalize(&pair.context);
            let (tn, _) = revin_normalize(&pair.target);
            let cf = patchify(&cn, patches, patch_len)?;
            let tf = patchify(&tn, patches, patch_len)?;
            let tc = down_avg(&tn, patches)?;
            for v in 0..dim {
                context.extend(cf.variable(v));
                target_fine.extend(tf.variable(v));
                target_coarse.extend(tc.variable(v));
                raw.extend(pair.context.column(v));
                scale.extend(std::iter::repeat_n(stats.std[v], pl));
                shift.extend(std::iter::repeat_n(stats.mean[v], pl));
            }
        }
        Ok(Self {
            units: n,
            context: Tensor::new(vec![n, patches, patch_len], context)?,
            target_fine: Tensor::new(vec![n, patches, patch_len], target_fine)?,
            target_coarse: Tensor::new(vec![n, 1, patch_len], target_coarse)?,
            raw_context: Tensor::new(vec![n, patches, patch_len], raw)?,
            scale: Tensor::new(vec![n, patches, patch_len], scale)?,
            shift: Tensor::new(vec![n, patches, patch_len], shift)?,
        })
    }
}

/// Normalized fine views of context windows only, `[W·V, P, L]`, window-major.
pub fn context_units(windows: &[&Window], patches: usize, patch_len: usize) -> Result<Tensor> {
    let first = windows.first().ok_or_else(|| Error::Data("no windows".into()))?;
    let dim = first.dim;
    let mut out = Vec::with_capacity(windows.len() * dim * patches * patch_len);
    for w in windows {
        check(w, patches, patch_len)?;
        if w.dim != dim {
            return Err(Error::Data("windows must share the variable count".into()));
        }
        let (wn, _) = revin_normalize(w);
        let f = patchify(&wn, patches, patch_len)?;
        for v in 0..dim {
            out.extend(f.variable(v));
        }
    }
    Tensor::new(vec![windows.len() * dim, patches, patch_len], out)
}
