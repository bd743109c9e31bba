use serde::{Deserialize, Serialize};

use super::layers::{Block, CrossBlock, Ctx, FeedForward, LayerNorm, Linear};
use super::params::{Init, ParamId, ParamStore};
use crate::codebook::assign_on_tape;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::autodiff::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerKind {
    Mlp,
    Conv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Patches per window (`P`).
    pub patches: usize,
    /// Points per patch (`L`).
    pub patch_len: usize,
    /// Embedding width (`D`).
    pub dim: usize,
    /// Codebook size (`K`).
    pub codes: usize,
    pub layers: usize,
    pub heads: usize,
    pub predictor_layers: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub tau: f64,
    pub tokenizer: TokenizerKind,
    pub conv_channels: usize,
    pub max_positions: usize,
    /// Feed encoder features straight to the predictors and decoder,
    /// skipping the soft codebook.
    pub bypass_codebook: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            patches: 5,
            patch_len: 20,
            dim: 64,
            codes: 32,
            layers: 2,
            heads: 4,
            predictor_layers: 2,
            ffn_mult: 2,
            dropout: 0.1,
            tau: 0.1,
            tokenizer: TokenizerKind::Mlp,
            conv_channels: 8,
            max_positions: 64,
            bypass_codebook: false,
        }
    }

    pub fn paper_default() -> Self {
        Self {
            dim: 256,
            codes: 128,
            layers: 6,
            heads: 8,
            predictor_layers: 6,
            ffn_mult: 4,
            ..Self::desk()
        }
    }

    pub fn window_len(&self) -> usize {
        self.patches * self.patch_len
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patches == 0 || self.patch_len == 0 {
            return bad("patches and patch_len must be positive".into());
        }
        if self.patches > self.max_positions {
            return bad(format!("{} patches exceed {} positions", self.patches, self.max_positions));
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.codes < 2 {
            return bad("codebook needs at least 2 codes".into());
        }
        if !(self.tau > 0.0) {
            return bad(format!("temperature must be > 0, got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0,1)", self.dropout));
        }
        if self.ffn_mult == 0 || self.conv_channels == 0 {
            return bad("ffn_mult and conv_channels must be positive".into());
        }
        Ok(())
    }

    /// Width of what the predictors consume: code distributions, or raw
    /// features when the codebook is bypassed.
    pub fn code_width(&self) -> usize {
        if self.bypass_codebook {
            self.dim
        } else {
            self.codes
        }
    }
}

#[derive(Clone, Debug)]
enum Stem {
    Mlp(Linear),
    Conv { kernel: ParamId, bias: ParamId, proj: Linear },
}

#[derive(Clone, Debug)]
struct ResidualMlp {
    ln: LayerNorm,
    ff: FeedForward,
}

/// Patch tokenizer, learned positions and a transformer stack.
#[derive(Clone, Debug)]
pub struct Encoder {
    stem: Stem,
    residual: Vec<ResidualMlp>,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    patch_len: usize,
    max_positions: usize,
}

impl Encoder {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.dim;
        let stem = match cfg.tokenizer {
            TokenizerKind::Mlp => Stem::Mlp(Linear::new(store, "enc.stem", cfg.patch_len, d, rng)),
            TokenizerKind::Conv => Stem::Conv {
                kernel: store.add("enc.conv.w", &[3, cfg.conv_channels], Init::Normal(1.0 / 3f64.sqrt()), rng),
                bias: store.add("enc.conv.b", &[cfg.conv_channels], Init::Zeros, rng),
                proj: Linear::new(store, "enc.conv.proj", cfg.patch_len * cfg.conv_channels, d, rng),
            },
        };
        let residual = (0..2)
            .map(|i| ResidualMlp {
                ln: LayerNorm::new(store, &format!("enc.res{i}.ln"), d, rng),
                ff: FeedForward::new(store, &format!("enc.res{i}.ff"), d, d, d, rng),
            })
            .collect();
        let pos = store.add("enc.pos", &[cfg.max_positions, d], Init::Normal(0.02), rng);
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(store, &format!("enc.block{i}"), d, cfg.heads, d * cfg.ffn_mult, rng))
            .collect();
        // Starts encoder outputs at unit norm, the scale of the prototypes.
        let ln_f = LayerNorm::with_gain(store, "enc.ln_f", d, 1.0 / (d as f64).sqrt(), rng);
        Self {
            stem,
            residual,
            pos,
            blocks,
            ln_f,
            patch_len: cfg.patch_len,
            max_positions: cfg.max_positions,
        }
    }

    /// `x: [N, n, L]` patches to features `[N, n, D]`. Each of the `N` rows is
    /// one variable of one window; rows never interact.
    pub fn forward(&self, c: &mut Ctx, x: Var) -> Result<Var> {
        let s = c.tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.patch_len {
            return Err(Error::shape("encode", format!("expected [N, n, {}], got {s:?}", self.patch_len)));
        }
        let (n, t) = (s[0], s[1]);
        if t == 0 || t > self.max_positions {
            return Err(Error::shape("encode", format!("{t} patches, at most {}", self.max_positions)));
        }
        let mut h = match &self.stem {
            Stem::Mlp(lin) => lin.forward(c, x)?,
            Stem::Conv { kernel, bias, proj } => {
                let l = self.patch_len;
                let flat = c.tape.reshape(x, &[n * t, l, 1])?;
                let pad = c.tape.constant(Tensor::zeros(&[n * t, 1, 1]));
                let padded = c.tape.concat(&[pad, flat, pad], 1)?;
                let taps: Vec<Var> = (0..3)
                    .map(|j| c.tape.slice(padded, 1, j, j + l))
                    .collect::<Result<_>>()?;
                let unfolded = c.tape.concat(&taps, 2)?;
                let y = c.tape.matmul(unfolded, c.p(*kernel))?;
                let y = c.tape.add_bcast(y, c.p(*bias))?;
                let y = c.tape.gelu(y)?;
                let ch = c.tape.shape(y)[2];
                let y = c.tape.reshape(y, &[n, t, l * ch])?;
                proj.forward(c, y)?
            }
        };
        for r in &self.residual {
            let u = r.ln.forward(c, h)?;
            let u = r.ff.forward(c, u)?;
            h = c.tape.add(h, u)?;
        }
        let pos = c.tape.slice(c.p(self.pos), 0, 0, t)?;
        h = c.tape.add_bcast(h, pos)?;
        for b in &self.blocks {
            h = b.forward(c, h)?;
        }
        self.ln_f.forward(c, h)
    }
}

/// Transformer over code sequences with a simplex head and a latent head.
#[derive(Clone, Debug)]
pub struct FinePredictor {
    embed: Linear,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head_p: Linear,
    head_z: Linear,
}

impl FinePredictor {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.dim;
        Self {
            embed: Linear::new(store, "fine.embed", cfg.code_width(), d, rng),
            pos: store.add("fine.pos", &[cfg.max_positions, d], Init::Normal(0.02), rng),
            blocks: (0..cfg.predictor_layers)
                .map(|i| Block::new(store, &format!("fine.block{i}"), d, cfg.heads, d * cfg.ffn_mult, rng))
                .collect(),
            ln_f: LayerNorm::new(store, "fine.ln_f", d, rng),
            head_p: Linear::new(store, "fine.head_p", d, cfg.codes, rng),
            head_z: Linear::new(store, "fine.head_z", d, d, rng),
        }
    }

    /// `codes: [N, P, K]` to `(p̂: [N, P, K], ẑ: [N, P, D])`.
    pub fn forward(&self, c: &mut Ctx, codes: Var) -> Result<(Var, Var)> {
        let t = c.tape.shape(codes)[1];
        let mut h = self.embed.forward(c, codes)?;
        let pos = c.tape.slice(c.p(self.pos), 0, 0, t)?;
        h = c.tape.add_bcast(h, pos)?;
        for b in &self.blocks {
            h = b.forward(c, h)?;
        }
        let h = self.ln_f.forward(c, h)?;
        let logits = self.head_p.forward(c, h)?;
        let p = c.tape.softmax(logits, 1.0)?;
        let z = self.head_z.forward(c, h)?;
        Ok((p, z))
    }
}

/// A learned query token cross-attending over the embedded code sequence.
#[derive(Clone, Debug)]
pub struct CoarsePredictor {
    embed: Linear,
    pos: ParamId,
    query: ParamId,
    blocks: Vec<CrossBlock>,
    ln_f: LayerNorm,
    head: Linear,
    simplex: bool,
}

impl CoarsePredictor {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.dim;
        Self {
            embed: Linear::new(store, "coarse.embed", cfg.code_width(), d, rng),
            pos: store.add("coarse.pos", &[cfg.max_positions, d], Init::Normal(0.02), rng),
            query: store.add("coarse.query", &[1, d], Init::Normal(1.0 / (d as f64).sqrt()), rng),
            blocks: (0..cfg.predictor_layers.max(1))
                .map(|i| CrossBlock::new(store, &format!("coarse.block{i}"), d, cfg.heads, d * cfg.ffn_mult, rng))
                .collect(),
            ln_f: LayerNorm::new(store, "coarse.ln_f", d, rng),
            head: Linear::new(store, "coarse.head", d, cfg.code_width(), rng),
            simplex: !cfg.bypass_codebook,
        }
    }

    /// `codes: [N, P, K]` to `[N, 1, K]` plus the last block's attention
    /// weights `[N, H, 1, P]`. Without a codebook the output is a `[N, 1, D]`
    /// latent instead of a distribution.
    pub fn forward(&self, c: &mut Ctx, codes: Var) -> Result<(Var, Var)> {
        let s = c.tape.shape(codes).to_vec();
        let (n, t) = (s[0], s[1]);
        let mut kv = self.embed.forward(c, codes)?;
        let pos = c.tape.slice(c.p(self.pos), 0, 0, t)?;
        kv = c.tape.add_bcast(kv, pos)?;
        let d = c.tape.shape(kv)[2];
        let zeros = c.tape.constant(Tensor::zeros(&[n, 1, d]));
        let mut q = c.tape.add_bcast(zeros, c.p(self.query))?;
        let mut weights = None;
        for b in &self.blocks {
            let (nq, w) = b.forward(c, q, kv)?;
            q = nq;
            weights = Some(w);
        }
        let q = self.ln_f.forward(c, q)?;
        let out = self.head.forward(c, q)?;
        let out = if self.simplex { c.tape.softmax(out, 1.0)? } else { out };
        Ok((out, weights.expect("at least one cross-attention block")))
    }
}

/// Pointwise MLP from embeddings back to normalized patches.
#[derive(Clone, Debug)]
pub struct Decoder {
    ff: FeedForward,
}

impl Decoder {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        Self {
            ff: FeedForward::new(store, "dec", cfg.dim, cfg.dim, cfg.patch_len, rng),
        }
    }

    /// `z: [N, P, D]` to `[N, P, L]`.
    pub fn forward(&self, c: &mut Ctx, z: Var) -> Result<Var> {
        self.ff.forward(c, z)
    }
}

/// Parameter layout of the whole network. Values live in a [`ParamStore`];
/// the encoder and codebook are allocated first so that the EMA shadow is
/// the store prefix of length [`Model::shadow_len`].
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub codebook: ParamId,
    pub fine: FinePredictor,
    pub coarse: CoarsePredictor,
    pub decoder: Decoder,
    shadow_len: usize,
}

impl Model {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, cfg, rng);
        let codebook = store.add("cb.prototypes", &[cfg.codes, cfg.dim], Init::Normal(1.0 / (cfg.dim as f64).sqrt()), rng);
        let shadow_len = store.len();
        let fine = FinePredictor::new(&mut store, cfg, rng);
        let coarse = CoarsePredictor::new(&mut store, cfg, rng);
        let decoder = Decoder::new(&mut store, cfg, rng);
        Ok((
            Self {
                cfg: cfg.clone(),
                encoder,
                codebook,
                fine,
                coarse,
                decoder,
                shadow_len,
            },
            store,
        ))
    }

    /// Number of leading parameters (encoder and codebook) mirrored by the EMA shadow.
    pub fn shadow_len(&self) -> usize {
        self.shadow_len
    }

    /// Encoder features then, unless bypassed, code distributions and
    /// expected embeddings. Works with online or shadow parameters bound in `c`.
    pub fn encode_and_assign(&self, c: &mut Ctx, x: Var) -> Result<Encoded> {
        let h = self.encoder.forward(c, x)?;
        if self.cfg.bypass_codebook {
            return Ok(Encoded { h, p: None, z: h });
        }
        let (p, z) = assign_on_tape(c.tape, h, c.p(self.codebook), self.cfg.tau)?;
        Ok(Encoded { h, p: Some(p), z })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub h: Var,
    /// `None` when the codebook is bypassed.
    pub p: Option<Var>,
    /// Expected embedding, or `h` itself when bypassed.
    pub z: Var,
}
