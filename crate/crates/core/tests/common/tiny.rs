//! A tiny model (V=1, P=2, K=4, D=8) and a finite-difference check of the
//! full composite loss with respect to every online parameter tensor.

use jepa_core::batch::UnitBatch;
use jepa_core::data::{make_window_pairs, RawSeries};
use jepa_core::gradcheck::central_diff5_at;
use jepa_core::nn::{ModelConfig, ParamStore};
use jepa_core::objectives::{composite_loss, LossInputs, Variant};
use jepa_core::rng::normal;
use jepa_core::trainer::{TrainConfig, TrainState};
use jepa_core::{Result, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(seed: u64, variant: Variant) -> TrainConfig {
    let model = ModelConfig {
        patches: 2,
        patch_len: 4,
        dim: 8,
        codes: 4,
        layers: 1,
        heads: 2,
        predictor_layers: 1,
        ffn_mult: 2,
        dropout: 0.0,
        max_positions: 4,
        ..ModelConfig::desk()
    };
    TrainConfig {
        seed,
        model,
        batch_size: 4,
        stride: 8,
        ..TrainConfig::desk()
    }
    .with_variant(variant)
}

pub struct Tiny {
    pub cfg: TrainConfig,
    pub state: TrainState,
    pub batch: UnitBatch,
}

/// Random series, three window pairs, and a shadow perturbed away from the
/// online copy so that targets differ from online outputs.
pub fn tiny(seed: u64, variant: Variant) -> Tiny {
    let cfg = tiny_config(seed, variant);
    let mut state = TrainState::new(&cfg).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in state.shadow.values_mut() {
        for x in t.data_mut() {
            *x += 0.1 * normal(&mut r);
        }
    }
    let values: Vec<f64> = (0..32).map(|i| (i as f64 * 0.7).sin() * 2.0 + normal(&mut r) + 3.0).collect();
    let s = RawSeries::unnamed(values, 1, None).unwrap();
    let pairs = make_window_pairs(&s, 8, 8).unwrap();
    let refs: Vec<_> = pairs.iter().take(3).collect();
    let batch = UnitBatch::from_pairs(&refs, 2, 4).unwrap();
    let _ = r.random::<u8>();
    Tiny { cfg, state, batch }
}

/// Loss with every stop-gradient output held at `frozen`.
pub fn loss_value(t: &Tiny, online: &ParamStore, frozen: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::frozen(frozen.to_vec());
    let on = online.bind(&mut tape);
    let sh = t.state.shadow.bind(&mut tape);
    let inputs = LossInputs {
        model: &t.state.model,
        online: &on,
        shadow: &sh,
        batch: &t.batch,
        weights: &t.cfg.weights,
        rec_weight: 0.3,
        variant: t.cfg.variant,
    };
    let (loss, _) = composite_loss(&mut tape, &inputs, None)?;
    Ok(tape.value(loss).item())
}

/// Autodiff gradient of the loss for every online tensor, flattened per
/// tensor, with the stop-gradient values seen on the way.
pub fn loss_gradients(t: &Tiny) -> Result<(Vec<Vec<f64>>, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let on = t.state.online.bind(&mut tape);
    let sh = t.state.shadow.bind(&mut tape);
    let inputs = LossInputs {
        model: &t.state.model,
        online: &on,
        shadow: &sh,
        batch: &t.batch,
        weights: &t.cfg.weights,
        rec_weight: 0.3,
        variant: t.cfg.variant,
    };
    let (loss, _) = composite_loss(&mut tape, &inputs, None)?;
    let frozen = tape.stopped_values();
    let g = tape.backward(loss)?;
    let grads = on
        .iter()
        .zip(t.state.online.values())
        .map(|(v, p)| g.get_or_zeros(*v, p.shape()).into_data())
        .collect();
    Ok((grads, frozen))
}

/// Worst relative error over one random coordinate of every parameter tensor.
/// Returns `(error, parameter name)`.
pub fn composite_gradcheck(seed: u64, variant: Variant) -> Result<(f64, String)> {
    let t = tiny(seed, variant);
    let (grads, frozen) = loss_gradients(&t)?;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0, String::new());
    for (i, name) in t.state.online.names().iter().enumerate() {
        let n = t.state.online.values()[i].len();
        let j = r.random_range(0..n);
        let x0 = t.state.online.values()[i].data().to_vec();
        let mut store = t.state.online.clone();
        let f = |x: &[f64]| {
            store.values_mut()[i].data_mut().copy_from_slice(x);
            loss_value(&t, &store, &frozen).expect("finite loss")
        };
        let fd = central_diff5_at(f, &x0, j, 1e-4);
        // Floored so exact zeros (unused positions) are not judged on rounding noise.
        let err = (grads[i][j] - fd).abs() / fd.abs().max(1e-6);
        if err > worst.0 {
            worst = (err, format!("{name}[{j}] autodiff {} fd {fd}", grads[i][j]));
        }
    }
    Ok(worst)
}
