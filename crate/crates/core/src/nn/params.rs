use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors in allocation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal(f64),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut Rng) -> ParamId {
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::Const(v) => Tensor::full(shape, v),
            Init::Normal(std) => Tensor::from_fn(shape, |_| std * rng::normal(rng)),
        };
        self.names.push(name.into());
        self.values.push(t);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Copy of the first `n` entries.
    pub fn prefix(&self, n: usize) -> Self {
        Self {
            names: self.names[..n].to_vec(),
            values: self.values[..n].to_vec(),
        }
    }

    /// Replace every value, checking names and shapes against `self`.
    pub fn load_values(&mut self, names: &[String], values: Vec<Tensor>) -> Result<()> {
        if names.len() != self.names.len() || values.len() != self.values.len() {
            return Err(Error::Incompatible(format!(
                "expected {} parameters, found {}",
                self.names.len(),
                names.len()
            )));
        }
        for (i, (n, v)) in names.iter().zip(&values).enumerate() {
            if n != &self.names[i] || v.shape() != self.values[i].shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {i}: expected {} {:?}, found {} {:?}",
                    self.names[i],
                    self.values[i].shape(),
                    n,
                    v.shape()
                )));
            }
        }
        self.values = values;
        Ok(())
    }

    /// Every parameter as a leaf on `tape`, tracked when the tape records gradients.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|t| tape.var(t.clone())).collect()
    }
}
