//! Eval-mode forward passes without gradient recording.

use super::layers::Ctx;
use super::model::Model;
use super::params::ParamStore;
use crate::autodiff::Tape;
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Inferred {
    pub h: Tensor,
    /// Code distributions, absent when the codebook is bypassed.
    pub p: Option<Tensor>,
    pub z: Tensor,
}

impl Model {
    /// Encoder (and codebook) outputs for `x: [N, n, L]` under `params`,
    /// which may be the online store or the EMA shadow.
    pub fn infer_codes(&self, params: &ParamStore, x: &Tensor) -> Result<Inferred> {
        let mut tape = Tape::inference();
        let vars = params.bind(&mut tape);
        let mut c = Ctx {
            tape: &mut tape,
            params: &vars,
            dropout: None,
        };
        let xv = c.tape.constant(x.clone());
        let e = self.encode_and_assign(&mut c, xv)?;
        Ok(Inferred {
            h: tape.value(e.h).clone(),
            p: e.p.map(|p| tape.value(p).clone()),
            z: tape.value(e.z).clone(),
        })
    }

    /// Fine predictions `(p̂, ẑ)` and coarse prediction for contexts `x`
    /// using the online parameters.
    pub fn infer_predictions(&self, online: &ParamStore, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let mut tape = Tape::inference();
        let vars = online.bind(&mut tape);
        let mut c = Ctx {
            tape: &mut tape,
            params: &vars,
            dropout: None,
        };
        let xv = c.tape.constant(x.clone());
        let e = self.encode_and_assign(&mut c, xv)?;
        let codes = e.p.unwrap_or(e.h);
        let (p_hat, z_hat) = self.fine.forward(&mut c, codes)?;
        let (coarse, _) = self.coarse.forward(&mut c, codes)?;
        Ok((
            tape.value(p_hat).clone(),
            tape.value(z_hat).clone(),
            tape.value(coarse).clone(),
        ))
    }
}
