use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::layers::{Ctx, Linear};
use crate::nn::ParamStore;
use crate::optim::Adam;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            lr: 1e-3,
            epochs: 200,
        }
    }
}

/// Two-layer MLP with a GELU hidden layer and a sigmoid output.
#[derive(Clone, Debug)]
pub struct Classifier {
    l1: Linear,
    l2: Linear,
    pub params: ParamStore,
}

#[derive(Clone, Debug)]
pub struct TrainedClassifier {
    pub classifier: Classifier,
    pub final_bce: f64,
    /// Training labels were all one class.
    pub degenerate: bool,
}

impl Classifier {
    pub fn new(input: usize, hidden: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, Stream::Classifier);
        let mut params = ParamStore::new();
        let l1 = Linear::new(&mut params, "clf.l1", input, hidden, &mut r);
        let l2 = Linear::new(&mut params, "clf.l2", hidden, 1, &mut r);
        Self { l1, l2, params }
    }

    fn logits(&self, c: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.l1.forward(c, x)?;
        let h = c.tape.gelu(h)?;
        self.l2.forward(c, h)
    }

    /// `ŝ ∈ (0,1)` for every row of `features`.
    pub fn predict(&self, features: &[Vec<f64>]) -> Result<Vec<f64>> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::inference();
        let vars = self.params.bind(&mut tape);
        let x = tape.constant(matrix(features)?);
        let mut c = Ctx {
            tape: &mut tape,
            params: &vars,
            dropout: None,
        };
        let l = self.logits(&mut c, x)?;
        Ok(tape.value(l).data().iter().map(|&s| sigmoid(s)).collect())
    }
}

pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

fn matrix(rows: &[Vec<f64>]) -> Result<Tensor> {
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidArgument("ragged feature rows".into()));
    }
    Tensor::new(vec![rows.len(), d], rows.concat())
}

/// Mean binary cross-entropy from logits: `softplus(s) − y·s`, with
/// `softplus(s) = relu(s) + log(1 + exp(−|s|))`.
fn bce_from_logits(tape: &mut Tape, logits: Var, labels: &Tensor) -> Result<Var> {
    let r = tape.relu(logits)?;
    let two_r = tape.scale(r, 2.0)?;
    let neg_abs = tape.sub(logits, two_r)?;
    let e = tape.exp(neg_abs)?;
    let e1 = tape.add_scalar(e, 1.0)?;
    let lg = tape.log(e1)?;
    let sp = tape.add(r, lg)?;
    let y = tape.constant(labels.clone());
    let ys = tape.mul(y, logits)?;
    let per = tape.sub(sp, ys)?;
    tape.mean(per)
}

/// Full-batch Adam on binary cross-entropy. Deterministic in `seed`.
pub fn train_classifier(
    features: &[Vec<f64>],
    labels: &[u8],
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<TrainedClassifier> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::Data(format!(
            "classifier needs matching non-empty features and labels ({} vs {})",
            features.len(),
            labels.len()
        )));
    }
    let degenerate = labels.iter().all(|&y| y == labels[0]);
    let mut clf = Classifier::new(features[0].len(), cfg.hidden, seed);
    let x = matrix(features)?;
    let y = Tensor::new(vec![labels.len(), 1], labels.iter().map(|&v| f64::from(v)).collect())?;
    let mut adam = Adam::new(clf.params.values(), cfg.lr, 0.0);
    let mut last = f64::NAN;
    for _ in 0..cfg.epochs {
        let mut tape = Tape::new();
        let vars = clf.params.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let mut c = Ctx {
            tape: &mut tape,
            params: &vars,
            dropout: None,
        };
        let l = clf.logits(&mut c, xv)?;
        let loss = bce_from_logits(&mut tape, l, &y)?;
        last = tape.value(loss).item();
        let g = tape.backward(loss)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .zip(clf.params.values())
            .map(|(v, p)| g.get_or_zeros(*v, p.shape()))
            .collect();
        adam.update(clf.params.values_mut(), &grads)?;
    }
    let final_bce = if cfg.epochs == 0 { f64::NAN } else { last };
    Ok(TrainedClassifier {
        classifier: clf,
        final_bce,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_matches_direct_formula() {
        let mut t = Tape::new();
        let l = t.var(Tensor::new(vec![3, 1], vec![2.0, -1.0, 0.3]).unwrap());
        let y = Tensor::new(vec![3, 1], vec![1.0, 0.0, 0.0]).unwrap();
        let b = bce_from_logits(&mut t, l, &y).unwrap();
        let want = [(2.0, 1.0), (-1.0, 0.0), (0.3, 0.0)]
            .iter()
            .map(|&(s, y): &(f64, f64)| {
                let p = sigmoid(s);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 3.0;
        assert!((t.value(b).item() - want).abs() < 1e-14);
    }
}
