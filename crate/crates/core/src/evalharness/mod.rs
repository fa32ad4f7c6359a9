//! Sliding-window cross-validation: fold construction, forecast samples,
//! reference forecasts, per-fold training and evaluation, and the ablation
//! grid.

mod splits;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffops::Scalar;
use crate::gridio::{write_atomic, Dataset};
use crate::metrics::{self, ForecastPair, MetricError, MetricReport, Scores, METRIC_NAMES};
use crate::synthdata::{season_week, SEASON};
use crate::training::{self, history_csv, save_checkpoint, Checkpoint, EpochRecord, TrainConfig, TrainError, WindowSet};
use crate::unetnode::{ArchConfig, Model, ModelError, Variant};

pub use splits::{make_splits, DateRange, FoldSpec, SplitLayout, FULL_LAYOUT_YEARS, MAX_FOLDS, MIN_SPAN_YEARS};

/// Published full-model scores on the 304×448 Arctic grid (MAE, RMSE, IIEE in
/// cells, mIoU, F1). Reference values only; not reachable on synthetic data.
pub const PUBLISHED_FULL_MODEL: Scores = Scores {
    mae: 0.0228,
    rmse: 0.0707,
    iiee: 1270.477,
    miou: 0.9204,
    f1: 0.9583,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("data span of {years} calendar years is too short for sliding-window folds")]
    InsufficientSpan { years: i32 },
    #[error("fold {fold}: no complete {split} samples")]
    EmptySplit { fold: usize, split: &'static str },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Issue weeks whose whole input and target windows fall inside `range`.
pub fn issues_in(data: &Dataset, range: &DateRange, input_len: usize, lead_times: usize) -> Vec<usize> {
    (0..data.len())
        .filter(|&t| t + 1 >= input_len && t + lead_times < data.len())
        .filter(|&t| range.contains(data.sic.date(t + 1 - input_len)) && range.contains(data.sic.date(t + lead_times)))
        .collect()
}

/// Weeks touched (as input or target) by samples issued at `issues`.
pub fn touched_weeks(issues: &[usize], input_len: usize, lead_times: usize) -> Vec<usize> {
    let mut weeks: Vec<usize> = issues
        .iter()
        .flat_map(|&t| t + 1 - input_len..=t + lead_times)
        .collect();
    weeks.sort_unstable();
    weeks.dedup();
    weeks
}

/// Samples of the three splits of one fold.
pub struct FoldSamples<'a> {
    pub train: WindowSet<'a>,
    pub val: WindowSet<'a>,
    pub test: WindowSet<'a>,
}

pub fn fold_samples<'a>(data: &'a Dataset, fold: &FoldSpec, arch: &ArchConfig) -> Result<FoldSamples<'a>, HarnessError> {
    let (l, tau) = (arch.input_len, arch.lead_times);
    let make = |range: &DateRange, split: &'static str| -> Result<WindowSet<'a>, HarnessError> {
        let issues = issues_in(data, range, l, tau);
        if issues.is_empty() {
            return Err(HarnessError::EmptySplit { fold: fold.index, split });
        }
        Ok(WindowSet::new(data, issues, l, tau)?)
    };
    Ok(FoldSamples {
        train: make(&fold.train, "training")?,
        val: make(&fold.val, "validation")?,
        test: make(&fold.test, "test")?,
    })
}

fn pair_from<T: Scalar>(set: &WindowSet<'_>, i: usize, pred: Vec<f32>) -> ForecastPair {
    let (_, target) = set.batch::<T>(&[i]);
    ForecastPair {
        truth: target.data().iter().map(|v| v.as_f64() as f32).collect(),
        pred,
        lead_times: set.lead_times(),
        issue_date: set.issue_date(i),
    }
}

/// Model forecasts for every sample of `set`.
pub fn model_forecasts(model: &Model<f32>, set: &WindowSet<'_>, batch: usize) -> Result<Vec<ForecastPair>, HarnessError> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let plane_len = set.lead_times() * set.dataset().sic.plane();
    let mut pairs = Vec::with_capacity(set.len());
    for chunk in idx.chunks(batch.max(1)) {
        let (input, target) = set.batch::<f32>(chunk);
        let pred = model.predict(&input)?;
        for (b, &i) in chunk.iter().enumerate() {
            pairs.push(ForecastPair {
                truth: target.item(b).to_vec(),
                pred: pred.data()[b * plane_len..(b + 1) * plane_len].to_vec(),
                lead_times: set.lead_times(),
                issue_date: set.issue_date(i),
            });
        }
    }
    Ok(pairs)
}

/// Repeats the last observed frame for every lead time.
pub fn persistence_forecasts(set: &WindowSet<'_>) -> Vec<ForecastPair> {
    let sic = &set.dataset().sic;
    (0..set.len())
        .map(|i| {
            let last = sic.frame(set.issues()[i]);
            let pred = (0..set.lead_times()).flat_map(|_| last.iter().copied()).collect();
            pair_from::<f32>(set, i, pred)
        })
        .collect()
}

/// Mean SIC field per seasonal week over the weeks of `range`.
#[derive(Clone, Debug, PartialEq)]
pub struct Climatology {
    weeks: Vec<Vec<f32>>,
}

impl Climatology {
    pub fn fit(data: &Dataset, range: &DateRange) -> Result<Self, HarnessError> {
        let plane = data.sic.plane();
        let mut sums = vec![vec![0.0f64; plane]; SEASON];
        let mut counts = vec![0usize; SEASON];
        let mut all = vec![0.0f64; plane];
        let mut total = 0usize;
        for t in (0..data.len()).filter(|&t| range.contains(data.sic.date(t))) {
            let wk = season_week(data.sic.date(t));
            for (s, &v) in sums[wk].iter_mut().zip(data.sic.frame(t)) {
                *s += v as f64;
            }
            for (s, &v) in all.iter_mut().zip(data.sic.frame(t)) {
                *s += v as f64;
            }
            counts[wk] += 1;
            total += 1;
        }
        if total == 0 {
            return Err(HarnessError::EmptySplit { fold: 0, split: "climatology" });
        }
        // a seasonal week without data falls back to the all-week mean
        let weeks = sums
            .into_iter()
            .zip(counts)
            .map(|(s, n)| {
                let (s, n) = if n == 0 { (all.clone(), total) } else { (s, n) };
                s.iter().map(|v| (v / n as f64) as f32).collect()
            })
            .collect();
        Ok(Self { weeks })
    }

    pub fn field(&self, week: usize) -> &[f32] {
        &self.weeks[week % SEASON]
    }

    pub fn forecasts(&self, set: &WindowSet<'_>) -> Vec<ForecastPair> {
        let sic = &set.dataset().sic;
        (0..set.len())
            .map(|i| {
                let t = set.issues()[i];
                let pred = (1..=set.lead_times())
                    .flat_map(|k| self.field(season_week(sic.date(t + k))).iter().copied())
                    .collect();
                pair_from::<f32>(set, i, pred)
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: FoldSpec,
    pub report: MetricReport,
    pub persistence: MetricReport,
    pub climatology: MetricReport,
    pub history: Vec<EpochRecord>,
    pub checkpoint: Checkpoint,
    pub stopped_early: bool,
}

/// Writes `fold_k/` with the checkpoint, history and metric reports.
pub fn write_fold_outputs(dir: &Path, result: &FoldResult) -> Result<PathBuf, HarnessError> {
    let fold_dir = dir.join(format!("fold_{}", result.fold.index));
    std::fs::create_dir_all(&fold_dir)?;
    save_checkpoint(&fold_dir.join("checkpoint.uck"), &result.checkpoint)?;
    write_atomic(&fold_dir.join("history.csv"), history_csv(&result.history).as_bytes())?;
    write_report(&fold_dir, &result.report)?;
    let csv = baselines_csv(&result.persistence, &result.climatology);
    write_atomic(&fold_dir.join("baselines.csv"), csv.as_bytes())?;
    Ok(fold_dir)
}

/// Overall scores of the two reference forecasts, one row per metric.
pub fn baselines_csv(persistence: &MetricReport, climatology: &MetricReport) -> String {
    let mut out = String::from("forecast,metric,value\n");
    for (name, r) in [("persistence", persistence), ("climatology", climatology)] {
        for (m, v) in METRIC_NAMES.iter().zip(r.overall.values()) {
            let _ = writeln!(out, "{name},{m},{v:.17e}");
        }
    }
    out
}

/// Writes `metrics.csv`, `metrics_by_lead.csv`, `metrics_by_month.csv` and `metrics.json`.
pub fn write_report(dir: &Path, report: &MetricReport) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join("metrics.csv"), report.overall_csv().as_bytes())?;
    write_atomic(&dir.join("metrics_by_lead.csv"), report.by_lead_csv().as_bytes())?;
    write_atomic(&dir.join("metrics_by_month.csv"), report.by_month_csv().as_bytes())?;
    write_atomic(&dir.join("metrics.json"), &serde_json::to_vec_pretty(report)?)?;
    Ok(())
}

/// Trains on the fold's training years, early-stops on its validation year
/// and evaluates the best checkpoint and both reference forecasts on its
/// test years. Outputs go to `out/fold_k/` when `out` is given.
pub fn run_fold(
    data: &Dataset,
    fold: &FoldSpec,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<FoldResult, HarnessError> {
    let samples = fold_samples(data, fold, arch)?;
    let model = Model::<f32>::new(arch.clone(), cfg.seed)?;
    let outcome = training::train(model, &samples.train, &samples.val, cfg, None)?;
    let checkpoint = outcome.best.expect("a fresh run always records a best checkpoint");
    let model = checkpoint.model()?;
    let report = metrics::evaluate(&model_forecasts(&model, &samples.test, cfg.batch_test)?, &data.mask)?;
    let persistence = metrics::evaluate(&persistence_forecasts(&samples.test), &data.mask)?;
    let clim = Climatology::fit(data, &fold.train)?;
    let climatology = metrics::evaluate(&clim.forecasts(&samples.test), &data.mask)?;
    let result = FoldResult {
        fold: *fold,
        report,
        persistence,
        climatology,
        history: outcome.history,
        checkpoint,
        stopped_early: outcome.stopped_early,
    };
    if let Some(dir) = out {
        write_fold_outputs(dir, &result)?;
    }
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// Scores averaged over folds.
    pub scores: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("variant,{}\n", METRIC_NAMES.join(","));
        for r in &self.rows {
            let vals: Vec<String> = r.scores.values().iter().map(|v| format!("{v:.17e}")).collect();
            let _ = writeln!(out, "{},{}", r.variant, vals.join(","));
        }
        out
    }

    pub fn row(&self, v: Variant) -> Option<&Scores> {
        self.rows.iter().find(|r| r.variant == v).map(|r| &r.scores)
    }

    /// Variant with the best score per metric (lowest error, highest overlap).
    pub fn best_per_metric(&self) -> Vec<(&'static str, Variant)> {
        METRIC_NAMES
            .iter()
            .enumerate()
            .map(|(m, &name)| {
                let higher_better = m >= 3;
                let best = self
                    .rows
                    .iter()
                    .max_by(|a, b| {
                        let (x, y) = (a.scores.values()[m], b.scores.values()[m]);
                        if higher_better {
                            x.total_cmp(&y)
                        } else {
                            y.total_cmp(&x)
                        }
                    })
                    .expect("non-empty table");
                (name, best.variant)
            })
            .collect()
    }
}

fn mean_scores(all: &[Scores]) -> Scores {
    let mut acc = [0.0; 5];
    for s in all {
        for (a, v) in acc.iter_mut().zip(s.values()) {
            *a += v;
        }
    }
    let n = all.len() as f64;
    Scores {
        mae: acc[0] / n,
        rmse: acc[1] / n,
        iiee: acc[2] / n,
        miou: acc[3] / n,
        f1: acc[4] / n,
    }
}

/// Trains and evaluates every variant on every fold with the same seed and
/// data; outputs go to `out/<variant>/fold_k/` and `out/ablation_table.csv`.
pub fn run_ablations(
    data: &Dataset,
    folds: &[FoldSpec],
    base: &ArchConfig,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<AblationTable, HarnessError> {
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let arch = variant.apply(base);
        let mut per_fold = Vec::new();
        for fold in folds {
            let dir = out.map(|d| d.join(variant.to_string()));
            per_fold.push(run_fold(data, fold, &arch, cfg, dir.as_deref())?.report.overall);
        }
        rows.push(AblationRow {
            variant,
            scores: mean_scores(&per_fold),
        });
    }
    let table = AblationTable { rows };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("ablation_table.csv"), table.to_csv().as_bytes())?;
    }
    Ok(table)
}

/// Zeroes the ConvNODE dynamics of every branch.
pub fn zero_dynamics<T: Scalar>(model: &mut Model<T>) {
    let names: Vec<String> = model
        .params()
        .names()
        .iter()
        .filter(|n| n.contains(".ode."))
        .cloned()
        .collect();
    for name in names {
        if let Some(t) = model.params_mut().by_name_mut(&name) {
            *t = t.map(|_| T::zero());
        }
    }
}
