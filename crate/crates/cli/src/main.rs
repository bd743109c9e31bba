use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use jepa_core::certify::{rollout_stability, run_suite};
use jepa_core::data::{synth_regime_series, RawSeries, SynthConfig};
use jepa_core::downstream::{run_protocol, scores_csv, DownstreamConfig, ScoreRow};
use jepa_core::io::write_atomic;
use jepa_core::report::{read_csv, read_log, to_csv, write_report, CodeUsageRow, ReportInputs};
use jepa_core::trainer::{fit, log_csv, Checkpoint, PretrainData, TrainConfig};
use jepa_core::Error;

#[derive(Parser)]
#[command(name = "jepa", version, about = "Multi-resolution JEPA pre-training and early-warning evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic regime series as CSV.
    Synth(SynthArgs),
    /// Pre-train an encoder, codebook and predictors; writes a checkpoint and a loss log.
    Pretrain(PretrainArgs),
    /// Frozen-feature early-warning evaluation of a checkpoint on a labeled series.
    Downstream(DownstreamArgs),
    /// Run the randomized certificate suite, plus a model rollout when given a checkpoint.
    TheoryCheck(TheoryArgs),
    /// Render SVG plots and a markdown summary from run artifacts.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of timesteps.
    #[arg(long)]
    t: usize,
    /// Number of variables.
    #[arg(long)]
    v: usize,
    /// Expected fraction of anomalous timesteps (default 0.1).
    #[arg(long)]
    anomaly_rate: Option<f64>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML file layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override with a dotted key; applied after the file, in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Series CSV; overrides `data` in the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Validate the config and data, print the resolved config, and stop.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct DownstreamArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint written by `pretrain`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled series CSV.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TheoryArgs {
    /// Adds a stability rollout of this model to the report.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Series for the rollout; synthesized from `--seed` when absent.
    #[arg(long, requires = "checkpoint")]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Training log CSV from `pretrain`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Scores CSV from `downstream`.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Code usage CSV from `downstream`.
    #[arg(long)]
    usage: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// A failure with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Incompatible(_) => 3,
            Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => 5,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Downstream(a) => downstream(a),
        Command::TheoryCheck(a) => theory_check(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn read_series(path: &Path) -> Result<RawSeries, Failure> {
    if !path.exists() {
        return Err(usage(format!("data file {} does not exist", path.display())));
    }
    Ok(RawSeries::read_csv(path)?)
}

fn ensure_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))
}

fn synth(a: SynthArgs) -> CliResult {
    let mut cfg = SynthConfig::default();
    if let Some(r) = a.anomaly_rate {
        cfg.anomaly_rate = r;
    }
    let s = synth_regime_series(a.seed, a.t, a.v, &cfg)?;
    write_atomic(&a.out, s.to_csv_string()?.as_bytes())?;
    let anomalous = s.labels().map_or(0, |l| l.iter().filter(|&&y| y == 1).count());
    eprintln!("wrote {} rows x {} variables ({anomalous} anomalous points) to {}", a.t, a.v, a.out.display());
    Ok(())
}

fn pretrain(a: PretrainArgs) -> CliResult {
    let base = TrainConfig::preset(&a.preset)?;
    let text = match &a.config.config {
        Some(p) => read_text(p)?,
        None => String::new(),
    };
    let cfg = TrainConfig::from_toml_with(&base, &text, &a.config.set)?;
    let data_path = a
        .data
        .clone()
        .or_else(|| cfg.data.as_ref().map(PathBuf::from))
        .ok_or_else(|| usage("no data: pass --data or set `data` in the config"))?;
    let series = read_series(&data_path)?;
    let data = PretrainData::prepare(&series, &cfg)?;
    if a.dry_run {
        print!("{}", cfg.to_toml()?);
        eprintln!(
            "dry run: {} training and {} validation pairs, {} constant channels removed",
            data.train.len(),
            data.val.len(),
            data.removed_channels.len()
        );
        return Ok(());
    }
    ensure_dir(&a.out)?;
    let t0 = Instant::now();
    let out = fit(&cfg, &data, |epoch, train, val| {
        eprintln!(
            "epoch {epoch:>3}  train {:>10.4}  val {:>10.4}  ({:.1}s)",
            train.total,
            val.total,
            t0.elapsed().as_secs_f64()
        );
    })?;
    let ck = Checkpoint {
        config: cfg.clone(),
        removed_channels: data.removed_channels.clone(),
        raw_dim: data.raw_dim,
        state: out.state,
    };
    ck.save(&a.out.join("checkpoint.bin"))?;
    write_atomic(&a.out.join("train_log.csv"), log_csv(&out.log)?.as_bytes())?;
    write_atomic(&a.out.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    eprintln!(
        "selected epoch {} of {}{}; wrote {}",
        out.best_epoch,
        out.epochs_run,
        if out.stopped_early { " (early stop)" } else { "" },
        a.out.display()
    );
    Ok(())
}

fn downstream(a: DownstreamArgs) -> CliResult {
    let text = match &a.config.config {
        Some(p) => read_text(p)?,
        None => String::new(),
    };
    let cfg = DownstreamConfig::from_toml_with(&DownstreamConfig::default(), &text, &a.config.set)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let series = read_series(&a.data)?;
    let out = run_protocol(&ck, &series, &cfg)?;
    if out.classifier.degenerate {
        eprintln!("warning: training split holds a single class; the classifier is degenerate");
    }
    ensure_dir(&a.out)?;
    let json = serde_json::to_string_pretty(&out.metrics).map_err(Error::from)?;
    write_atomic(&a.out.join("metrics.json"), format!("{json}\n").as_bytes())?;
    write_atomic(&a.out.join("scores.csv"), scores_csv(&out.scores)?.as_bytes())?;
    write_atomic(&a.out.join("code_usage.csv"), to_csv(&out.usage)?.as_bytes())?;
    let m = &out.metrics;
    let auc = m.auc.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!("windows  train {}  val {}  test {}", out.split.train.len(), out.split.val.len(), out.split.test.len());
    println!("precision {:.4}  recall {:.4}  f1 {:.4}  auc {auc}  threshold {}", m.precision, m.recall, m.f1, m.threshold);
    println!("tp {}  fp {}  tn {}  fn {}", m.tp, m.fp, m.tn, m.fn_);
    Ok(())
}

fn theory_check(a: TheoryArgs) -> CliResult {
    let mut report = run_suite(a.trials, a.seed)?;
    if let Some(path) = &a.checkpoint {
        let ck = Checkpoint::load(path)?;
        let series = match &a.data {
            Some(p) => read_series(p)?,
            None => {
                let len = (a.steps + 2) * ck.config.window();
                synth_regime_series(a.seed, len, ck.raw_dim, &SynthConfig::default())?
            }
        };
        report.push(rollout_stability(&ck, &series, a.steps)?);
    }
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    write_atomic(&a.out, format!("{json}\n").as_bytes())?;
    print!("{}", report.table());
    if report.all_passed {
        Ok(())
    } else {
        Err(Failure {
            code: 4,
            message: "at least one certificate was violated".into(),
        })
    }
}

fn report(a: ReportArgs) -> CliResult {
    if a.log.is_none() && a.scores.is_none() && a.usage.is_none() {
        return Err(usage("nothing to report: pass --log, --scores and/or --usage"));
    }
    let mut inputs = ReportInputs::default();
    if let Some(p) = &a.log {
        inputs.log = Some(read_log(p)?);
    }
    if let Some(p) = &a.scores {
        let rows: Vec<ScoreRow> = read_csv(p)?;
        if rows.is_empty() {
            return Err(usage(format!("{} holds no scores", p.display())));
        }
        inputs.scores = Some(rows);
    }
    if let Some(p) = &a.usage {
        let rows: Vec<CodeUsageRow> = read_csv(p)?;
        if rows.is_empty() {
            return Err(usage(format!("{} holds no code usage rows", p.display())));
        }
        inputs.usage = Some(rows);
    }
    for f in write_report(&inputs, &a.out)? {
        eprintln!("wrote {}", a.out.join(f).display());
    }
    Ok(())
}
