use crate::batch::context_units;
use crate::data::Window;
use crate::error::{Error, Result};
use crate::nn::{Model, ParamStore};
use crate::tensor::Tensor;

/// Windows encoded per forward pass; bounds peak memory on long series.
const CHUNK: usize = 64;

/// Elementwise max over the variable axis of `[V, P, K]`, flattened to `P·K`.
pub fn max_pool_variables(codes: &Tensor) -> Result<Vec<f64>> {
    let s = codes.shape();
    if s.len() != 3 || s[0] == 0 {
        return Err(Error::shape("max_pool_variables", format!("expected [V, P, K], got {s:?}")));
    }
    let width = s[1] * s[2];
    let d = codes.data();
    Ok((0..width)
        .map(|j| (0..s[0]).map(|v| d[v * width + j]).fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// Frozen pooled code features, one row of `P·K` per context window.
///
/// Encodes in eval mode under `params` (online or EMA store). With the codebook
/// bypassed, the continuous embeddings are pooled instead (`P·D` per row).
pub fn extract_features(model: &Model, params: &ParamStore, windows: &[&Window]) -> Result<Vec<Vec<f64>>> {
    let cfg = &model.cfg;
    let mut rows = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(CHUNK) {
        let x = context_units(chunk, cfg.patches, cfg.patch_len)?;
        let out = model.infer_codes(params, &x)?;
        let codes = out.p.unwrap_or(out.h);
        let width = codes.shape()[2];
        let per = cfg.patches * width;
        let mut offset = 0;
        for w in chunk {
            let n = w.dim * per;
            let block = Tensor::new(vec![w.dim, cfg.patches, width], codes.data()[offset..offset + n].to_vec())?;
            rows.push(max_pool_variables(&block)?);
            offset += n;
        }
    }
    Ok(rows)
}
