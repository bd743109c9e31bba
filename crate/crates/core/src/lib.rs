//! Self-supervised multi-resolution joint-embedding predictive pre-training
//! for multivariate time series, with a soft codebook bottleneck, the
//! downstream early-warning protocol, and runtime certificates for the
//! stability and non-collapse bounds of the soft code map.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod batch;
pub mod certify;
pub mod codebook;
pub mod data;
pub mod downstream;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod report;
pub mod rng;
pub mod settings;
pub mod tensor;
pub mod theory;
pub mod trainer;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
