mod common;

use common::tiny::tiny;
use jepa_core::batch::context_units;
use jepa_core::data::{make_window_pairs, synth_regime_series, SynthConfig};
use jepa_core::nn::ModelConfig;
use jepa_core::objectives::Variant;
use jepa_core::trainer::{TrainConfig, TrainState};

#[test]
fn inference_shapes_follow_the_config() {
    let t = tiny(0, Variant::Full);
    let m = &t.cfg.model;
    let x = &t.batch.context;
    let units = t.batch.units;
    let out = t.state.model.infer_codes(&t.state.online, x).unwrap();
    assert_eq!(out.h.shape(), &[units, m.patches, m.dim]);
    assert_eq!(out.p.as_ref().unwrap().shape(), &[units, m.patches, m.codes]);
    assert_eq!(out.z.shape(), &[units, m.patches, m.dim]);
    let (p_hat, z_hat, coarse) = t.state.model.infer_predictions(&t.state.online, x).unwrap();
    assert_eq!(p_hat.shape(), &[units, m.patches, m.codes]);
    assert_eq!(z_hat.shape(), &[units, m.patches, m.dim]);
    assert_eq!(coarse.shape()[0], units);
}

#[test]
fn bypassed_codebook_has_no_distributions() {
    let t = tiny(0, Variant::NoCodebookModule);
    let out = t.state.model.infer_codes(&t.state.online, &t.batch.context).unwrap();
    assert!(out.p.is_none());
    assert_eq!(out.h, out.z);
}

#[test]
fn units_are_processed_independently() {
    let t = tiny(1, Variant::Full);
    let all = t.state.model.infer_codes(&t.state.online, &t.batch.context).unwrap();
    let per = t.batch.context.len() / t.batch.units;
    let one = jepa_core::Tensor::new(
        [&[1usize][..], &t.batch.context.shape()[1..]].concat(),
        t.batch.context.data()[per..2 * per].to_vec(),
    )
    .unwrap();
    let single = t.state.model.infer_codes(&t.state.online, &one).unwrap();
    let k = single.p.as_ref().unwrap().len();
    let pa = &all.p.unwrap().data()[k..2 * k].to_vec();
    for (a, b) in pa.iter().zip(single.p.unwrap().data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn initialization_is_seeded() {
    let a = TrainState::new(&TrainConfig::desk()).unwrap();
    let b = TrainState::new(&TrainConfig::desk()).unwrap();
    assert_eq!(a.online, b.online);
    let c = TrainState::new(&TrainConfig { seed: 1, ..TrainConfig::desk() }).unwrap();
    assert_ne!(a.online, c.online);
    assert_eq!(a.shadow.values(), &a.online.values()[..a.shadow.len()]);
}

#[test]
fn desk_model_encodes_a_synthetic_window() {
    let cfg = TrainConfig::desk();
    let m: &ModelConfig = &cfg.model;
    let state = TrainState::new(&cfg).unwrap();
    let s = synth_regime_series(0, 400, 3, &SynthConfig::default()).unwrap();
    let pairs = make_window_pairs(&s, cfg.window(), 100).unwrap();
    let x = context_units(&[&pairs[0].context], m.patches, m.patch_len).unwrap();
    let out = state.model.infer_codes(&state.shadow, &x).unwrap();
    assert_eq!(out.p.as_ref().unwrap().shape(), &[3, m.patches, m.codes]);
    // Encoder outputs start near the prototypes' unit scale.
    let rows = out.h.rows();
    let mean_norm: f64 = (0..rows).map(|i| out.h.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>() / rows as f64;
    assert!((0.5..2.0).contains(&mean_norm), "{mean_norm}");
}
