//! Building blocks shared by the encoder, predictors and decoder.

use rand::Rng as _;

use super::params::{Init, ParamId, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Forward-pass context: the tape, the bound parameters and the dropout source.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a [Var],
    /// `Some((rate, rng))` in training mode.
    pub dropout: Option<(f64, &'a mut Rng)>,
}

impl Ctx<'_> {
    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        if *rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - *rate;
        let shape = self.tape.shape(x).to_vec();
        let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let m = self.tape.constant(mask);
        self.tape.mul(x, m)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut Rng) -> Self {
        let w = store.add(format!("{name}.w"), &[input, output], Init::Normal(1.0 / (input as f64).sqrt()), rng);
        let b = store.add(format!("{name}.b"), &[output], Init::Zeros, rng);
        Self { w, b }
    }

    pub fn forward(&self, c: &mut Ctx, x: Var) -> Result<Var> {
        let y = c.tape.matmul(x, c.p(self.w))?;
        c.tape.add_bcast(y, c.p(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut Rng) -> Self {
        Self::with_gain(store, name, dim, 1.0, rng)
    }

    pub fn with_gain(store: &mut ParamStore, name: &str, dim: usize, gain: f64, rng: &mut Rng) -> Self {
        let gain = store.add(format!("{name}.g"), &[dim], Init::Const(gain), rng);
        let bias = store.add(format!("{name}.b"), &[dim], Init::Zeros, rng);
        Self { gain, bias }
    }

    pub fn forward(&self, c: &mut Ctx, x: Var) -> Result<Var> {
        let n = c.tape.layer_norm(x, LN_EPS)?;
        let n = c.tape.mul_bcast(n, c.p(self.gain))?;
        c.tape.add_bcast(n, c.p(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, out: usize, rng: &mut Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, out, rng),
        }
    }

    pub fn forward(&self, c: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.up.forward(c, x)?;
        let h = c.tape.gelu(h)?;
        self.down.forward(c, h)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    fn split(&self, c: &mut Ctx, x: Var) -> Result<Var> {
        let s = c.tape.shape(x).to_vec();
        let (n, t, d) = (s[0], s[1], s[2]);
        let x = c.tape.reshape(x, &[n, t, self.heads, d / self.heads])?;
        c.tape.permute(x, &[0, 2, 1, 3])
    }

    /// `query: [N, n_q, D]`, `context: [N, n_k, D]`. Returns the output
    /// `[N, n_q, D]` and attention weights `[N, H, n_q, n_k]`.
    pub fn forward(&self, c: &mut Ctx, query: Var, context: Var) -> Result<(Var, Var)> {
        let q = self.q.forward(c, query)?;
        let k = self.k.forward(c, context)?;
        let v = self.v.forward(c, context)?;
        let (q, k, v) = (self.split(c, q)?, self.split(c, k)?, self.split(c, v)?);
        let (out, weights) = c.tape.scaled_dot_product_attention(q, k, v, None)?;
        let out = c.tape.permute(out, &[0, 2, 1, 3])?;
        let s = c.tape.shape(out).to_vec();
        let out = c.tape.reshape(out, &[s[0], s[1], s[2] * s[3]])?;
        Ok((self.o.forward(c, out)?, weights))
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim, rng),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim, rng),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, hidden, dim, rng),
        }
    }

    pub fn forward(&self, c: &mut Ctx, x: Var) -> Result<Var> {
        let n = self.ln1.forward(c, x)?;
        let (a, _) = self.attn.forward(c, n, n)?;
        let a = c.dropout(a)?;
        let x = c.tape.add(x, a)?;
        let n = self.ln2.forward(c, x)?;
        let f = self.ff.forward(c, n)?;
        let f = c.dropout(f)?;
        c.tape.add(x, f)
    }
}

/// Pre-norm cross-attention block: queries attend to a context sequence.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl CrossBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), dim, rng),
            ln_kv: LayerNorm::new(store, &format!("{name}.ln_kv"), dim, rng),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim, rng),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, hidden, dim, rng),
        }
    }

    pub fn forward(&self, c: &mut Ctx, q: Var, context: Var) -> Result<(Var, Var)> {
        let nq = self.ln_q.forward(c, q)?;
        let nk = self.ln_kv.forward(c, context)?;
        let (a, w) = self.attn.forward(c, nq, nk)?;
        let a = c.dropout(a)?;
        let q = c.tape.add(q, a)?;
        let n = self.ln2.forward(c, q)?;
        let f = self.ff.forward(c, n)?;
        let f = c.dropout(f)?;
        Ok((c.tape.add(q, f)?, w))
    }
}
