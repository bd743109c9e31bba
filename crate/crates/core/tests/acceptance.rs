//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Thresholds for the end-to-end criteria are read from `pilot/desk-synth.toml`
//! at the workspace root. A failure listed there under `expected_failures` is
//! printed as such and does not fail the run; any other failure does.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::ops::{cases, check_case};
use common::tiny::{composite_gradcheck, tiny, tiny_config};
use jepa_core::certify::{rollout_stability, run_suite, CertificateReport};
use jepa_core::codebook::{expected_embedding, soft_assign, Codebook};
use jepa_core::data::{synth_regime_series, SynthConfig};
use jepa_core::downstream::classifier::ClassifierConfig;
use jepa_core::downstream::metrics::{auc, candidate_thresholds, compute_metrics, select_threshold, Confusion};
use jepa_core::downstream::{run_protocol, DownstreamConfig};
use jepa_core::objectives::Variant;
use jepa_core::theory::{check_variance_lower_bound, phi, solve_rho_star};
use jepa_core::trainer::{collapse_monitor, fit, train_step, Checkpoint, PretrainData, TrainConfig, TrainState};
use jepa_core::batch::UnitBatch;

type Result<T, E = jepa_core::Error> = std::result::Result<T, E>;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

#[derive(Deserialize)]
struct Pilot {
    thresholds: Thresholds,
    expected_failures: Expected,
}

#[derive(Deserialize)]
struct Thresholds {
    mean_auc_min: f64,
    null_auc_min: f64,
    null_auc_max: f64,
    runtime_max_seconds: f64,
    loss_reduction_min: f64,
}

#[derive(Deserialize)]
struct Expected {
    criteria: Vec<u32>,
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gradients() -> Result<Outcome> {
    let mut worst_op = (0.0f64, String::new());
    for case in cases() {
        for seed in 0..100 {
            let e = check_case(&case, seed, 1e-5)?;
            if e > worst_op.0 {
                worst_op = (e, case.name.to_string());
            }
        }
    }
    let mut worst_loss = (0.0f64, String::new());
    for seed in 0..100 {
        let (e, at) = composite_gradcheck(seed, Variant::Full)?;
        if e > worst_loss.0 {
            worst_loss = (e, at);
        }
    }
    Ok(outcome(
        worst_op.0 < 1e-4 && worst_loss.0 < 1e-4,
        format!(
            "{} ops x 100 seeds, worst {:.1e} ({}); composite loss x 100 seeds, worst {:.1e}",
            cases().len(),
            worst_op.0,
            worst_op.1,
            worst_loss.0
        ),
    ))
}

fn simplex_invariants() -> Result<Outcome> {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let (mut sum_err, mut hull_bad) = (0.0f64, 0usize);
    for _ in 0..10_000 {
        let k = r.random_range(2..=32);
        let d = r.random_range(1..=16);
        let scale = r.random_range(0.01..10.0);
        let rows: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| scale * r.random_range(-1.0..1.0)).collect()).collect();
        let cb = Codebook::from_rows(&rows, r.random_range(0.01..1.0))?;
        let h: Vec<f64> = (0..d).map(|_| r.random_range(-5.0..5.0)).collect();
        let p = soft_assign(&h, &cb)?;
        if p.iter().any(|&x| x < 0.0) {
            hull_bad += 1;
        }
        sum_err = sum_err.max((p.iter().sum::<f64>() - 1.0).abs());
        let z = expected_embedding(&p, &cb)?;
        if z.iter().map(|x| x * x).sum::<f64>().sqrt() > cb.radius() {
            hull_bad += 1;
        }
    }
    Ok(outcome(
        sum_err <= 1e-9 && hull_bad == 0,
        format!("10000 assignments, max |Σp-1| {sum_err:.1e}, {hull_bad} violations"),
    ))
}

fn certificate_line(report: &CertificateReport, names: &[&str]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for n in names {
        let s = report.get(n).expect("known certificate");
        pass &= s.failed == 0 && s.passed > 0;
        parts.push(format!("{n}: {}/{} pass", s.passed, s.trials));
    }
    outcome(pass, parts.join(", "))
}

fn non_collapse(report: &CertificateReport) -> Result<Outcome> {
    let s = report.get("variance-lower-bound").expect("known certificate");
    let cb = Codebook::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]], 0.1)?;
    let (c, _) = check_variance_lower_bound(&[vec![1.0, 0.0], vec![0.0, 1.0]], &cb)?;
    let equal = (c.lhs - 1.0).abs() < 1e-10 && (c.rhs - 1.0).abs() < 1e-10;
    Ok(outcome(
        s.failed == 0 && s.passed >= 1000 && equal,
        format!(
            "{} constructed batches, {} violations; equality case trace {} bound {}",
            s.passed + s.failed,
            s.failed,
            c.lhs,
            c.rhs
        ),
    ))
}

fn rho_star() -> Result<Outcome> {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = r.random_range(2..=512usize);
        let eta = (k as f64).ln() * r.random_range(1e-6..=1.0);
        worst = worst.max((phi(solve_rho_star(eta, k)?, k) - eta).abs());
    }
    let mut endpoints = true;
    for k in 2..=512usize {
        endpoints &= solve_rho_star((k as f64).ln(), k)? == 1.0 / k as f64;
    }
    Ok(outcome(
        worst <= 1e-10 && endpoints,
        format!("1000 random (eta, K), max |phi-eta| {worst:.1e}; endpoints exact: {endpoints}"),
    ))
}

fn ema_contract() -> Result<Outcome> {
    let (mut grad_max, mut ema_err) = (0.0f64, 0.0f64);
    for v in Variant::ALL {
        for seed in 0..5 {
            let mut t = tiny(seed, v);
            for _ in 0..3 {
                let before = t.state.shadow.clone();
                let rep = train_step(&mut t.state, &t.cfg, &t.batch)?;
                grad_max = grad_max.max(rep.shadow_grad_max);
                let rho = t.cfg.ema_decay;
                for (i, s) in t.state.shadow.values().iter().enumerate() {
                    let o = t.state.online.values()[i].data();
                    for ((a, b), c) in s.data().iter().zip(before.values()[i].data()).zip(o) {
                        ema_err = ema_err.max((a - (rho * b + (1.0 - rho) * c)).abs());
                    }
                }
            }
        }
    }
    Ok(outcome(
        grad_max == 0.0 && ema_err <= 1e-12,
        format!("7 variants x 5 seeds x 3 steps, shadow grad max {grad_max}, EMA error {ema_err:.1e}"),
    ))
}

fn f1_scan(scores: &[f64], labels: &[u8]) -> (f64, f64) {
    let mut cands: Vec<f64> = scores.to_vec();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    cands.push(f64::INFINITY);
    let mut best = (f64::NEG_INFINITY, f64::INFINITY);
    for t in cands {
        let f = Confusion::at(scores, labels, t).f1();
        if f > best.0 {
            best = (f, t);
        }
    }
    best
}

fn protocol_integrity() -> Result<Outcome> {
    let cfg = tiny_config(0, Variant::Full);
    let ck = Checkpoint {
        state: TrainState::new(&cfg)?,
        config: cfg,
        removed_channels: vec![],
        raw_dim: 2,
    };
    let dc = DownstreamConfig {
        stride: 8,
        classifier: ClassifierConfig {
            epochs: 40,
            ..ClassifierConfig::default()
        },
        ..DownstreamConfig::default()
    };
    let series = synth_regime_series(5, 800, 2, &SynthConfig::default())?;
    let base = run_protocol(&ck, &series, &dc)?;
    let cut = base.scores[0].window_start + ck.config.window();
    let mut labels = series.labels().expect("labelled").to_vec();
    labels.iter_mut().skip(cut).for_each(|y| *y = 1 - *y);
    let other = run_protocol(&ck, &series.clone().with_labels(Some(labels))?, &dc)?;
    let leak_free = other.classifier.classifier.params == base.classifier.classifier.params
        && other.metrics.threshold.to_bits() == base.metrics.threshold.to_bits();

    let mut r = ChaCha8Rng::seed_from_u64(8);
    let mut agree = 0;
    for _ in 0..200 {
        let n = r.random_range(2..300);
        let labels: Vec<u8> = (0..n).map(|_| u8::from(r.random_bool(0.3))).collect();
        let scores: Vec<f64> = (0..n).map(|_| (r.random::<f64>() * 40.0).round() / 40.0).collect();
        let (best, _) = f1_scan(&scores, &labels);
        let thr = select_threshold(&scores, &labels)?;
        if Confusion::at(&scores, &labels, thr).f1() == best {
            agree += 1;
        }
    }
    Ok(outcome(
        leak_free && agree == 200,
        format!("leak test unchanged: {leak_free}; threshold optimal on {agree}/200 score sets"),
    ))
}

fn metric_oracles() -> Result<Outcome> {
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    let mut counts_ok = true;
    for _ in 0..1000 {
        let n = r.random_range(2..120);
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(r.random_bool(0.4))).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n).map(|_| (r.random::<f64>() * 10.0).round()).collect();
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    num += match scores[i].partial_cmp(&scores[j]) {
                        Some(std::cmp::Ordering::Greater) => 1.0,
                        Some(std::cmp::Ordering::Equal) => 0.5,
                        _ => 0.0,
                    };
                }
            }
        }
        worst = worst.max((auc(&scores, &labels).expect("both classes") - num / den).abs());

        let cands = candidate_thresholds(&scores);
        let thr = cands[r.random_range(0..cands.len())];
        let m = compute_metrics(&scores, &labels, thr)?;
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (&s, &y) in scores.iter().zip(&labels) {
            match (s >= thr, y) {
                (true, 1) => tp += 1,
                (true, _) => fp += 1,
                (false, 1) => fn_ += 1,
                _ => {}
            }
        }
        let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let rc = tp as f64 / (tp + fn_) as f64;
        let f1 = if p + rc == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) };
        counts_ok &= m.tp == tp && m.fp == fp && m.fn_ == fn_ && m.tp + m.fp + m.tn + m.fn_ == n;
        counts_ok &= (m.precision - p).abs() < 1e-12 && (m.recall - rc).abs() < 1e-12 && (m.f1 - f1).abs() < 1e-12;
    }
    Ok(outcome(
        worst <= 1e-12 && counts_ok,
        format!("1000 sets, max AUC gap {worst:.1e}; confusion counts and P/R/F1 agree: {counts_ok}"),
    ))
}

struct EndToEnd {
    aucs: Vec<f64>,
    nulls: Vec<f64>,
    seconds: f64,
    loss_reduction: f64,
    seed0: Option<Checkpoint>,
    trace_full: f64,
}

fn desk_run(seed: u64, variant: Variant) -> Result<(Checkpoint, jepa_core::data::RawSeries, PretrainData, Vec<f64>)> {
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::desk()
    }
    .with_variant(variant);
    let series = synth_regime_series(seed, 20_000, 3, &SynthConfig::default())?;
    let data = PretrainData::prepare(&series, &cfg)?;
    let mut epoch_loss = Vec::new();
    let out = fit(&cfg, &data, |_, train, _| epoch_loss.push(train.total))?;
    let ck = Checkpoint {
        config: cfg,
        removed_channels: data.removed_channels.clone(),
        raw_dim: data.raw_dim,
        state: out.state,
    };
    Ok((ck, series, data, epoch_loss))
}

fn variance_trace(ck: &Checkpoint, data: &PretrainData) -> Result<f64> {
    let refs: Vec<_> = data.val.iter().collect();
    let m = &ck.config.model;
    let b = UnitBatch::from_pairs(&refs, m.patches, m.patch_len)?;
    Ok(collapse_monitor(&ck.state, &b.context)?.trace_cov)
}

fn end_to_end() -> Result<EndToEnd> {
    let t0 = Instant::now();
    let mut e = EndToEnd {
        aucs: vec![],
        nulls: vec![],
        seconds: 0.0,
        loss_reduction: f64::INFINITY,
        seed0: None,
        trace_full: f64::NAN,
    };
    for seed in 0..5 {
        let (ck, series, data, losses) = desk_run(seed, Variant::Full)?;
        let first = losses[0];
        let last = *losses.last().expect("at least one epoch");
        e.loss_reduction = e.loss_reduction.min((first - last) / first);
        let mut dc = DownstreamConfig {
            seed,
            ..DownstreamConfig::default()
        };
        let real = run_protocol(&ck, &series, &dc)?;
        dc.shuffle_labels = true;
        let null = run_protocol(&ck, &series, &dc)?;
        e.aucs.push(real.metrics.auc.unwrap_or(f64::NAN));
        e.nulls.push(null.metrics.auc.unwrap_or(f64::NAN));
        if seed == 0 {
            e.trace_full = variance_trace(&ck, &data)?;
            e.seed0 = Some(ck);
        }
    }
    e.seconds = t0.elapsed().as_secs_f64();
    Ok(e)
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn stability(report: &CertificateReport, seed0: &Checkpoint) -> Result<Outcome> {
    let w = seed0.config.window();
    let long = synth_regime_series(100, 1002 * w, 3, &SynthConfig::default())?;
    let roll = rollout_stability(seed0, &long, 1000)?;
    let synth = report.get("stability").expect("known certificate");
    Ok(outcome(
        roll.failed == 0 && roll.passed > 0 && synth.failed == 0,
        format!(
            "rollout 1000 steps: {} checks, {} violations; synthetic tuples: {}/{} pass",
            roll.trials, roll.failed, synth.passed, synth.trials
        ),
    ))
}

fn reproducibility() -> Result<Outcome> {
    let run = || -> Result<(Vec<u8>, String)> {
        let cfg = TrainConfig {
            seed: 7,
            max_epochs: 2,
            selection_start: 1,
            ..TrainConfig::desk()
        };
        let series = synth_regime_series(7, 4000, 3, &SynthConfig::default())?;
        let data = PretrainData::prepare(&series, &cfg)?;
        let out = fit(&cfg, &data, |_, _, _| {})?;
        let ck = Checkpoint {
            config: cfg,
            removed_channels: data.removed_channels.clone(),
            raw_dim: data.raw_dim,
            state: out.state,
        };
        let m = run_protocol(&ck, &series, &DownstreamConfig::default())?;
        let json = serde_json::to_string_pretty(&m.metrics).expect("serializable");
        Ok((ck.to_bytes()?, json))
    };
    let (a, b) = (run()?, run()?);
    Ok(outcome(
        a == b,
        format!("checkpoint {} bytes identical: {}; metrics JSON identical: {}", a.0.len(), a.0 == b.0, a.1 == b.1),
    ))
}

fn main() -> ExitCode {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../pilot/desk-synth.toml");
    let pilot: Pilot = match std::fs::read_to_string(path).map(|s| toml::from_str(&s)) {
        Ok(Ok(p)) => p,
        other => {
            eprintln!("cannot read {path}: {:?}", other.err());
            return ExitCode::FAILURE;
        }
    };
    let th = &pilot.thresholds;
    let mut lines: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut push = |n: u32, name: &'static str, r: Result<Outcome, String>| {
        let o = r.unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        print_line(n, name, &o, &pilot.expected_failures.criteria);
        lines.push((n, name, o));
    };

    push(1, "gradient correctness", gradients().map_err(msg));
    push(2, "simplex and hull invariants", simplex_invariants().map_err(msg));
    let suite = run_suite(10_000, 0).map_err(msg);
    push(
        3,
        "Lipschitz and Pinsker bounds",
        suite.as_ref().map(|r| certificate_line(r, &["lipschitz", "pinsker"])).map_err(Clone::clone),
    );
    let e2e = end_to_end().map_err(msg);
    push(
        4,
        "stability bound",
        match (&suite, &e2e) {
            (Ok(s), Ok(EndToEnd { seed0: Some(ck), .. })) => stability(s, ck).map_err(msg),
            (Err(e), _) | (_, Err(e)) => Err(e.clone()),
            _ => Ok(outcome(false, "no seed-0 model")),
        },
    );
    push(
        5,
        "non-collapse bound",
        suite.as_ref().map_err(Clone::clone).and_then(|s| non_collapse(s).map_err(msg)),
    );
    push(6, "rho* solver", rho_star().map_err(msg));
    push(7, "stop-gradient and EMA contracts", ema_contract().map_err(msg));
    push(8, "protocol integrity", protocol_integrity().map_err(msg));
    push(9, "metric oracles", metric_oracles().map_err(msg));
    push(
        10,
        "end-to-end synthetic benchmark",
        e2e.as_ref().map_err(Clone::clone).map(|e| {
            let (m, n) = (mean(&e.aucs), mean(&e.nulls));
            let ok = m >= th.mean_auc_min
                && (th.null_auc_min..=th.null_auc_max).contains(&n)
                && e.seconds <= th.runtime_max_seconds
                && e.loss_reduction >= th.loss_reduction_min;
            let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
            outcome(
                ok,
                format!(
                    "AUC [{}] mean {m:.4} (>= {}); null [{}] mean {n:.4}; {:.0}s; min loss reduction {:.0}%",
                    fmt(&e.aucs),
                    th.mean_auc_min,
                    fmt(&e.nulls),
                    e.seconds,
                    100.0 * e.loss_reduction
                ),
            )
        }),
    );
    push(
        11,
        "ablation variance ordering",
        e2e.as_ref().map_err(Clone::clone).and_then(|e| {
            let (ck, _, data, _) = desk_run(0, Variant::NoCodebookModule).map_err(msg)?;
            let ablated = variance_trace(&ck, &data).map_err(msg)?;
            Ok(outcome(
                ablated < e.trace_full,
                format!("trace without codebook {ablated:.4} vs full {:.4}", e.trace_full),
            ))
        }),
    );
    push(12, "reproducibility", reproducibility().map_err(msg));

    let unexpected = lines
        .iter()
        .filter(|(n, _, o)| !o.pass && !pilot.expected_failures.criteria.contains(n))
        .count();
    let passed = lines.iter().filter(|(_, _, o)| o.pass).count();
    println!("{passed}/{} criteria passed, {unexpected} unexpected failures", lines.len());
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn msg(e: jepa_core::Error) -> String {
    e.to_string()
}

fn print_line(n: u32, name: &str, o: &Outcome, expected: &[u32]) {
    let status = match (o.pass, expected.contains(&n)) {
        (true, _) => "PASS",
        (false, true) => "FAIL (expected, see pilot/desk-synth.toml)",
        (false, false) => "FAIL",
    };
    println!("[{n:>2}] {status} {name}: {}", o.detail);
}
