mod common;

use common::tiny::tiny_config;
use jepa_core::data::{synth_regime_series, SynthConfig, Window};
use jepa_core::downstream::classifier::{train_classifier, ClassifierConfig};
use jepa_core::downstream::features::{extract_features, max_pool_variables};
use jepa_core::downstream::metrics::{auc, select_threshold, Confusion};
use jepa_core::downstream::{run_protocol, DownstreamConfig};
use jepa_core::objectives::Variant;
use jepa_core::trainer::{Checkpoint, TrainState};
use jepa_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn f1_by_hand(scores: &[f64], labels: &[u8], thr: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= thr, y == 1) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            _ => {}
        }
    }
    if tp == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    }
}

#[test]
fn threshold_matches_an_exhaustive_scan() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..20 {
        let labels: Vec<u8> = (0..200).map(|_| u8::from(r.random_bool(0.3))).collect();
        // Rounded so ties occur.
        let scores: Vec<f64> = labels
            .iter()
            .map(|&y| ((r.random::<f64>() + 0.4 * f64::from(y)) * 50.0).round() / 50.0)
            .collect();
        let mut uniq = scores.clone();
        uniq.sort_by(f64::total_cmp);
        uniq.dedup();
        uniq.push(f64::INFINITY);
        let best = uniq.iter().map(|&t| f1_by_hand(&scores, &labels, t)).fold(0.0, f64::max);
        let lowest_best = *uniq.iter().find(|&&t| f1_by_hand(&scores, &labels, t) == best).unwrap();
        let thr = select_threshold(&scores, &labels).unwrap();
        let got = Confusion::at(&scores, &labels, thr).f1();
        assert!((got - best).abs() < 1e-15, "trial {trial}: {got} vs {best}");
        let same = scores.iter().all(|&s| (s >= thr) == (s >= lowest_best));
        assert!(same, "trial {trial}: {thr} vs {lowest_best}");
    }
}

#[test]
fn auc_matches_pairwise_counting() {
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let labels: Vec<u8> = (0..1000).map(|_| u8::from(r.random_bool(0.2))).collect();
    let scores: Vec<f64> = labels
        .iter()
        .map(|&y| ((r.random::<f64>() + 0.3 * f64::from(y)) * 20.0).round())
        .collect();
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &yi) in labels.iter().enumerate() {
        for (j, &yj) in labels.iter().enumerate() {
            if yi == 1 && yj == 0 {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    let got = auc(&scores, &labels).unwrap();
    assert!((got - num / den).abs() < 1e-12, "{got} vs {}", num / den);
    assert_eq!(auc(&scores, &vec![0; 1000]), None);
}

#[test]
fn separable_data_is_fit() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..100 {
        let c = (i % 2) as u8;
        let mu = if c == 1 { 2.0 } else { -2.0 };
        x.push(vec![mu + 0.3 * r.random::<f64>(), -mu + 0.3 * r.random::<f64>(), r.random::<f64>()]);
        y.push(c);
    }
    let t = train_classifier(&x, &y, &ClassifierConfig::default(), 0).unwrap();
    assert!(t.final_bce < 0.05, "{}", t.final_bce);
    assert!(!t.degenerate);
    let scores = t.classifier.predict(&x).unwrap();
    assert_eq!(auc(&scores, &y), Some(1.0));
}

#[test]
fn single_class_training_is_flagged() {
    let x = vec![vec![0.1, 0.2]; 10];
    let t = train_classifier(&x, &[0; 10], &ClassifierConfig::default(), 0).unwrap();
    assert!(t.degenerate);
    assert_eq!(select_threshold(&t.classifier.predict(&x).unwrap(), &[0; 10]).unwrap(), f64::INFINITY);
}

proptest! {
    #[test]
    fn pooling_matches_a_triple_loop(v in 1usize..5, p in 1usize..4, k in 1usize..6, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..v * p * k).map(|_| r.random::<f64>()).collect();
        let t = Tensor::new(vec![v, p, k], data.clone()).unwrap();
        let got = max_pool_variables(&t).unwrap();
        for i in 0..p {
            for j in 0..k {
                let mut m = f64::NEG_INFINITY;
                for u in 0..v {
                    m = m.max(data[(u * p + i) * k + j]);
                }
                prop_assert_eq!(got[i * k + j], m);
            }
        }
    }
}

#[test]
fn duplicated_variables_do_not_change_features() {
    let cfg = tiny_config(0, Variant::Full);
    let state = TrainState::new(&cfg).unwrap();
    let w = cfg.window();
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let two: Vec<f64> = (0..w * 2).map(|_| r.random::<f64>()).collect();
    let three: Vec<f64> = two.chunks(2).flat_map(|c| [c[0], c[1], c[1]]).collect();
    let a = Window::new(w, 2, two).unwrap();
    let b = Window::new(w, 3, three).unwrap();
    let fa = extract_features(&state.model, &state.shadow, &[&a]).unwrap();
    let fb = extract_features(&state.model, &state.shadow, &[&b]).unwrap();
    assert_eq!(fa, fb);
    assert_eq!(fa[0].len(), cfg.model.patches * cfg.model.codes);
}

fn tiny_checkpoint() -> Checkpoint {
    let cfg = tiny_config(0, Variant::Full);
    Checkpoint {
        state: TrainState::new(&cfg).unwrap(),
        config: cfg,
        removed_channels: vec![],
        raw_dim: 2,
    }
}

fn downstream_cfg() -> DownstreamConfig {
    DownstreamConfig {
        stride: 8,
        classifier: ClassifierConfig {
            epochs: 40,
            ..ClassifierConfig::default()
        },
        ..DownstreamConfig::default()
    }
}

#[test]
fn test_labels_cannot_influence_fitting() {
    let ck = tiny_checkpoint();
    let cfg = downstream_cfg();
    let series = synth_regime_series(5, 800, 2, &SynthConfig::default()).unwrap();
    let base = run_protocol(&ck, &series, &cfg).unwrap();
    let w = ck.config.window();
    let first_test = base.scores[0].window_start;
    let mut labels = series.labels().unwrap().to_vec();
    for y in labels.iter_mut().skip(first_test + w) {
        *y = 1 - *y;
    }
    let flipped = series.clone().with_labels(Some(labels)).unwrap();
    let other = run_protocol(&ck, &flipped, &cfg).unwrap();
    assert_eq!(other.classifier.classifier.params, base.classifier.classifier.params);
    assert_eq!(other.metrics.threshold.to_bits(), base.metrics.threshold.to_bits());
    assert_eq!(other.val_f1, base.val_f1);
    assert_ne!(other.labels[base.split.test.clone()], base.labels[base.split.test.clone()]);
}

#[test]
fn protocol_is_deterministic_and_chronological() {
    let ck = tiny_checkpoint();
    let cfg = downstream_cfg();
    let series = synth_regime_series(6, 800, 2, &SynthConfig::default()).unwrap();
    let a = run_protocol(&ck, &series, &cfg).unwrap();
    let b = run_protocol(&ck, &series, &cfg).unwrap();
    assert_eq!(serde_json::to_string(&a.metrics).unwrap(), serde_json::to_string(&b.metrics).unwrap());
    assert_eq!(a.split.test.len(), a.scores.len());
    assert!(a.scores.windows(2).all(|s| s[0].window_start < s[1].window_start));
    let n = a.features.len();
    assert_eq!(a.split.train.end, (n as f64 * 0.6).floor() as usize);
}

#[test]
fn unlabeled_series_is_rejected() {
    let ck = tiny_checkpoint();
    let series = synth_regime_series(6, 800, 2, &SynthConfig::default()).unwrap().with_labels(None).unwrap();
    assert!(run_protocol(&ck, &series, &downstream_cfg()).is_err());
}
