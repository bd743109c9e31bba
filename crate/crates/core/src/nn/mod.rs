//! Encoder, soft-codebook wiring, predictors and decoder.

pub mod infer;
pub mod layers;
pub mod model;
pub mod params;

pub use infer::Inferred;
pub use layers::Ctx;
pub use model::{CoarsePredictor, Decoder, Encoded, Encoder, FinePredictor, Model, ModelConfig, TokenizerKind};
pub use params::{Init, ParamId, ParamStore};
