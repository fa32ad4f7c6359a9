//! Command-line driver: synthetic data generation, training, evaluation,
//! single forecasts, the ablation grid and fold listing.

mod config;
mod manifest;
mod pgm;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{Duration, NaiveDate};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use thiserror::Error;

use unicorn_core::evalharness::{
    self, baselines_csv, fold_samples, make_splits, model_forecasts, persistence_forecasts, run_ablations,
    run_fold, Climatology, FoldSpec, HarnessError,
};
use unicorn_core::gridio::{save_gridseq, write_atomic, Cadence, Dataset, GridError, GridSequence};
use unicorn_core::metrics::{self, MetricError};
use unicorn_core::synthdata::{generate, SynthConfig, SynthError};
use unicorn_core::training::{input_at, load_checkpoint, TrainError};
use unicorn_core::unetnode::{ModelError, Variant};

pub use config::RunConfig;
pub use manifest::{RunManifest, MANIFEST_FILE};
pub use pgm::encode_pgm;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "UNICORN_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

#[derive(Debug, Parser)]
#[command(name = "unicorn", version, about = "Weekly sea-ice concentration forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a deterministic synthetic dataset.
    Synth(SynthArgs),
    /// Train one fold and evaluate it on the fold's test years.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test years of a fold.
    Eval(EvalArgs),
    /// Issue a single forecast from a given week.
    Forecast(ForecastArgs),
    /// Train and evaluate every model variant over the folds.
    Ablate(AblateArgs),
    /// Print the sliding-window folds for a date span.
    Splits(SplitsArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 416)]
    weeks: usize,
    /// Grid size as HxW.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "unicorn")]
    variant: Variant,
    #[arg(long, default_value_t = 1)]
    fold: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    fold: usize,
}

#[derive(Debug, Args)]
struct ForecastArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Issue date; must be one of the dataset's weeks.
    #[arg(long)]
    at: NaiveDate,
    /// Output GSEQ file; images and the manifest are written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use only the first N folds.
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Debug, Args)]
struct SplitsArgs {
    #[arg(long)]
    start: NaiveDate,
    #[arg(long)]
    end: NaiveDate,
    /// Also write the folds as JSON to this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let dim = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad dimension {v:?}: {e}"));
    Ok((dim(h)?, dim(w)?))
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 on a usage error, 2 on a runtime error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, &args) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // A second call in the same process finds the pool already built.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cmd: Command, args: &[String]) -> Result<(), CliError> {
    let t0 = Instant::now();
    match cmd {
        Command::Synth(a) => synth(a, args, t0),
        Command::Train(a) => train(a, args, t0),
        Command::Eval(a) => eval(a, args, t0),
        Command::Forecast(a) => forecast(a, args, t0),
        Command::Ablate(a) => ablate(a, args, t0),
        Command::Splits(a) => splits(a, args, t0),
    }
}

/// Relative paths of all files below `root`, excluding the manifest.
fn artifacts(root: &Path) -> Result<Vec<String>, CliError> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> std::io::Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if path.file_name().is_some_and(|n| n != MANIFEST_FILE) {
                let rel = path.strip_prefix(root).expect("below root");
                out.push(rel.to_string_lossy().replace('\\', "/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    Ok(out)
}

fn finish(mut manifest: RunManifest, out: &Path, t0: Instant) -> Result<(), CliError> {
    manifest.artifacts = artifacts(out)?;
    manifest.write(&out.join(MANIFEST_FILE), t0.elapsed())
}

fn load_data(dir: &Path) -> Result<Dataset, CliError> {
    Dataset::load_dir(dir).map_err(|e| CliError::Config(format!("cannot load dataset {}: {e}", dir.display())))
}

fn data_folds(data: &Dataset) -> Result<Vec<FoldSpec>, CliError> {
    Ok(make_splits(data.sic.start_date(), data.sic.date(data.len() - 1))?)
}

fn select_fold(data: &Dataset, index: usize) -> Result<FoldSpec, CliError> {
    let folds = data_folds(data)?;
    let n = folds.len();
    folds
        .into_iter()
        .find(|f| f.index == index)
        .ok_or_else(|| CliError::Config(format!("fold {index} does not exist; the data span has {n} folds")))
}

fn print_scores(label: &str, s: &metrics::Scores) {
    println!(
        "{label:<12} mae {:.5} rmse {:.5} iiee {:.3} miou {:.4} f1 {:.4}",
        s.mae, s.rmse, s.iiee, s.miou, s.f1
    );
}

fn synth(a: SynthArgs, args: &[String], t0: Instant) -> Result<(), CliError> {
    let cfg = SynthConfig {
        height: a.size.0,
        width: a.size.1,
        n_weeks: a.weeks,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let data = generate(&cfg)?;
    data.save_dir(&a.out)?;
    write_atomic(&a.out.join("synth_config.json"), &serde_json::to_vec_pretty(&cfg)?)?;
    println!(
        "wrote {} weeks of {}x{} data starting {} to {}",
        data.len(),
        cfg.height,
        cfg.width,
        data.sic.start_date(),
        a.out.display()
    );
    let manifest = RunManifest::new("synth", args, serde_json::to_value(&cfg)?, Some(cfg.seed));
    finish(manifest, &a.out, t0)
}

fn train(a: TrainArgs, args: &[String], t0: Instant) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&a.config)?;
    cfg.arch = a.variant.apply(&cfg.arch);
    let data = load_data(&a.data)?;
    let fold = select_fold(&data, a.fold)?;
    std::fs::create_dir_all(&a.out)?;
    let result = run_fold(&data, &fold, &cfg.arch, &cfg.train, Some(&a.out))?;
    for h in &result.history {
        println!("epoch {:>4} train {:.6} val {:.6}", h.epoch, h.train_loss, h.val_loss);
    }
    print_scores(a.variant.label(), &result.report.overall);
    print_scores("persistence", &result.persistence.overall);
    print_scores("climatology", &result.climatology.overall);
    let mut config = cfg.to_json();
    config["variant"] = json!(a.variant.to_string());
    config["fold"] = json!(a.fold);
    let manifest = RunManifest::new("train", args, config, Some(cfg.train.seed));
    finish(manifest, &a.out, t0)
}

fn eval(a: EvalArgs, args: &[String], t0: Instant) -> Result<(), CliError> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = ck.model()?;
    let data = load_data(&a.data)?;
    ck.arch.check_grid(data.sic.height(), data.sic.width())?;
    let fold = select_fold(&data, a.fold)?;
    let samples = fold_samples(&data, &fold, &ck.arch)?;
    let report = metrics::evaluate(&model_forecasts(&model, &samples.test, ck.train.batch_test)?, &data.mask)?;
    let persistence = metrics::evaluate(&persistence_forecasts(&samples.test), &data.mask)?;
    let climatology = metrics::evaluate(&Climatology::fit(&data, &fold.train)?.forecasts(&samples.test), &data.mask)?;
    evalharness::write_report(&a.out, &report)?;
    write_atomic(&a.out.join("baselines.csv"), baselines_csv(&persistence, &climatology).as_bytes())?;
    print_scores("model", &report.overall);
    print_scores("persistence", &persistence.overall);
    print_scores("climatology", &climatology.overall);
    let mut config = RunConfig { arch: ck.arch.clone(), train: ck.train.clone() }.to_json();
    config["fold"] = json!(a.fold);
    config["checkpoint_epoch"] = json!(ck.epoch);
    let manifest = RunManifest::new("eval", args, config, Some(ck.train.seed));
    finish(manifest, &a.out, t0)
}

fn forecast(a: ForecastArgs, args: &[String], t0: Instant) -> Result<(), CliError> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = ck.model()?;
    let data = load_data(&a.data)?;
    let (h, w) = (data.sic.height(), data.sic.width());
    ck.arch.check_grid(h, w)?;
    let t = data
        .sic
        .index_of(a.at)
        .ok_or_else(|| CliError::Config(format!("{} is not a week of the dataset", a.at)))?;
    let input = input_at::<f32>(&data, t, ck.arch.input_len)?;
    let pred = model.predict(&input)?;
    let tau = ck.arch.lead_times;
    let ocean = data.mask.ocean();

    let dir = match a.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir)?;
    let stem = a
        .out
        .file_stem()
        .ok_or_else(|| CliError::Config(format!("--out {} has no file name", a.out.display())))?
        .to_string_lossy()
        .into_owned();
    let first = a.at + Duration::weeks(1);
    let valid: Vec<bool> = (0..tau).flat_map(|_| ocean.iter().copied()).collect();
    let seq = GridSequence::new(tau, h, w, pred.data().to_vec(), valid, first, Cadence::Weekly)?;
    save_gridseq(&a.out, &seq)?;

    let mut artifacts = vec![a.out.file_name().expect("checked above").to_string_lossy().into_owned()];
    for k in 0..tau {
        let field = seq.frame(k);
        let name = format!("{stem}_lead{}.pgm", k + 1);
        write_atomic(&dir.join(&name), &encode_pgm(h, w, field, ocean))?;
        artifacts.push(name);
        if t + 1 + k < data.len() {
            let truth = data.sic.frame(t + 1 + k);
            let known = data.sic.frame_valid(t + 1 + k);
            let err: Vec<f32> = field.iter().zip(truth).map(|(p, y)| (p - y).abs()).collect();
            let mask: Vec<bool> = ocean.iter().zip(known).map(|(&o, &v)| o && v).collect();
            let name = format!("{stem}_abserr_lead{}.pgm", k + 1);
            write_atomic(&dir.join(&name), &encode_pgm(h, w, &err, &mask))?;
            artifacts.push(name);
        }
    }
    println!("forecast issued {} for {} lead weeks written to {}", a.at, tau, a.out.display());

    let config = json!({ "issue_date": a.at, "arch": ck.arch, "checkpoint_epoch": ck.epoch });
    let mut manifest = RunManifest::new("forecast", args, config, Some(ck.train.seed));
    manifest.artifacts = artifacts;
    manifest.write(&dir.join(format!("{stem}.manifest.json")), t0.elapsed())
}

fn ablate(a: AblateArgs, args: &[String], t0: Instant) -> Result<(), CliError> {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let data = load_data(&a.data)?;
    let mut folds = data_folds(&data)?;
    if let Some(n) = a.folds {
        if n == 0 {
            return Err(CliError::Config("--folds must be at least 1".into()));
        }
        folds.truncate(n);
    }
    std::fs::create_dir_all(&a.out)?;
    let table = run_ablations(&data, &folds, &cfg.arch, &cfg.train, Some(&a.out))?;
    print!("{}", table.to_csv());
    for (metric, v) in table.best_per_metric() {
        println!("best {metric}: {v}");
    }
    let mut config = cfg.to_json();
    config["folds"] = json!(folds.len());
    let manifest = RunManifest::new("ablate", args, config, Some(cfg.train.seed));
    finish(manifest, &a.out, t0)
}

fn splits(a: SplitsArgs, args: &[String], t0: Instant) -> Result<(), CliError> {
    let folds = make_splits(a.start, a.end)?;
    for f in &folds {
        println!(
            "fold {}: train {}..{} val {}..{} test {}..{}",
            f.index, f.train.start, f.train.end, f.val.start, f.val.end, f.test.start, f.test.end
        );
    }
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        write_atomic(&out.join("splits.json"), &serde_json::to_vec_pretty(&folds)?)?;
        let config = json!({ "start": a.start, "end": a.end });
        finish(RunManifest::new("splits", args, config, None), out, t0)?;
    }
    Ok(())
}
