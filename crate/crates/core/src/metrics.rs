//! SIC (MAE, RMSE) and extent (IIEE, mIoU, F1) scores over the ocean mask,
//! with per-lead-time and per-month breakdowns.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::{Datelike, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridio::RegionMask;

/// Concentration at or above which a cell belongs to the ice extent.
pub const EXTENT_THRESHOLD: f32 = 0.15;
/// Area of one 25 km grid cell.
pub const CELL_AREA_KM2: f64 = 625.0;

pub const METRIC_NAMES: [&str; 5] = ["mae", "rmse", "iiee", "miou", "f1"];

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("no forecast pairs")]
    Empty,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("value {value} at index {index} is outside [0, 1]")]
    Range { index: usize, value: f32 },
}

/// Truth and prediction, both `τ×H×W` frame-major, for one issue date.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastPair {
    pub truth: Vec<f32>,
    pub pred: Vec<f32>,
    pub lead_times: usize,
    pub issue_date: NaiveDate,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub mae: f64,
    pub rmse: f64,
    pub iiee: f64,
    pub miou: f64,
    pub f1: f64,
}

impl Scores {
    pub fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "mae" => self.mae,
            "rmse" => self.rmse,
            "iiee" => self.iiee,
            "miou" => self.miou,
            "f1" => self.f1,
            _ => return None,
        })
    }

    pub fn values(&self) -> [f64; 5] {
        [self.mae, self.rmse, self.iiee, self.miou, self.f1]
    }

    fn from_values(v: [f64; 5]) -> Self {
        Self {
            mae: v[0],
            rmse: v[1],
            iiee: v[2],
            miou: v[3],
            f1: v[4],
        }
    }

    /// IIEE expressed in km² instead of grid cells.
    pub fn iiee_km2(&self) -> f64 {
        self.iiee * CELL_AREA_KM2
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    /// `|∩| / |∪|`, 1 for an empty union.
    pub fn iou(&self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }

    /// `2TP / (2TP + FP + FN)`, 1 when all three counts are zero.
    pub fn f1(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / d as f64
        }
    }

    fn add(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Sums for one lead time of one forecast pair.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct LeadStats {
    abs: f64,
    sq: f64,
    cells: u64,
    conf: Confusion,
}

pub fn binarize_extent(field: &[f32]) -> Vec<bool> {
    field.iter().map(|&v| v >= EXTENT_THRESHOLD).collect()
}

fn check_pair(p: &ForecastPair, mask: &RegionMask) -> Result<(), MetricError> {
    let plane = mask.height() * mask.width();
    let n = p.lead_times * plane;
    if p.lead_times == 0 || p.truth.len() != n || p.pred.len() != n {
        return Err(MetricError::Shape(format!(
            "pair of {}/{} values for {} lead times on a {}x{} mask",
            p.truth.len(),
            p.pred.len(),
            p.lead_times,
            mask.height(),
            mask.width()
        )));
    }
    for (index, &value) in p.truth.iter().chain(&p.pred).enumerate() {
        if mask.contains(index % plane) && !(0.0..=1.0).contains(&value) {
            return Err(MetricError::Range {
                index: index % n,
                value,
            });
        }
    }
    Ok(())
}

fn lead_stats(p: &ForecastPair, mask: &RegionMask) -> Vec<LeadStats> {
    let plane = mask.height() * mask.width();
    (0..p.lead_times)
        .map(|l| {
            let mut s = LeadStats::default();
            for k in (0..plane).filter(|&k| mask.contains(k)) {
                let (y, yh) = (p.truth[l * plane + k], p.pred[l * plane + k]);
                let d = (y as f64 - yh as f64).abs();
                s.abs += d;
                s.sq += d * d;
                s.cells += 1;
                match (y >= EXTENT_THRESHOLD, yh >= EXTENT_THRESHOLD) {
                    (true, true) => s.conf.tp += 1,
                    (false, true) => s.conf.fp += 1,
                    (true, false) => s.conf.fn_ += 1,
                    (false, false) => {}
                }
            }
            s
        })
        .collect()
}

fn all_stats(pairs: &[ForecastPair], mask: &RegionMask) -> Result<Vec<Vec<LeadStats>>, MetricError> {
    let first = pairs.first().ok_or(MetricError::Empty)?;
    for p in pairs {
        check_pair(p, mask)?;
        if p.lead_times != first.lead_times {
            return Err(MetricError::Shape("pairs with different lead times".into()));
        }
    }
    Ok(pairs.par_iter().map(|p| lead_stats(p, mask)).collect())
}

/// Scores of a set of `(pair, lead)` entries, summed in slice order.
fn combine<'a>(entries: impl Iterator<Item = &'a LeadStats>) -> Scores {
    let (mut abs, mut sq, mut cells, mut iou, mut n) = (0.0, 0.0, 0u64, 0.0, 0usize);
    let mut conf = Confusion::default();
    for e in entries {
        abs += e.abs;
        sq += e.sq;
        cells += e.cells;
        iou += e.conf.iou();
        conf.add(&e.conf);
        n += 1;
    }
    Scores {
        mae: abs / cells as f64,
        rmse: (sq / cells as f64).sqrt(),
        iiee: (conf.fp + conf.fn_) as f64 / n as f64,
        miou: iou / n as f64,
        f1: conf.f1(),
    }
}

/// `(MAE, RMSE)` pooled over all pairs, lead times and ocean cells.
pub fn sic_metrics(pairs: &[ForecastPair], mask: &RegionMask) -> Result<(f64, f64), MetricError> {
    let s = combine(all_stats(pairs, mask)?.iter().flatten());
    Ok((s.mae, s.rmse))
}

/// `(IIEE, mIoU, F1)` of the binarized extents.
pub fn sie_metrics(pairs: &[ForecastPair], mask: &RegionMask) -> Result<(f64, f64, f64), MetricError> {
    let s = combine(all_stats(pairs, mask)?.iter().flatten());
    Ok((s.iiee, s.miou, s.f1))
}

/// Pooled confusion counts over all pairs and lead times.
pub fn confusion(pairs: &[ForecastPair], mask: &RegionMask) -> Result<Confusion, MetricError> {
    let mut c = Confusion::default();
    for s in all_stats(pairs, mask)?.iter().flatten() {
        c.add(&s.conf);
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonthRow {
    pub month: u32,
    pub n: usize,
    pub mean: Scores,
    /// Standard error `sd / √n` with the sample standard deviation; 0 for `n = 1`.
    pub se: Scores,
}

/// Groups per-forecast scores by the calendar month of the issue date.
pub fn monthly_aggregate(records: &[(NaiveDate, Scores)]) -> Vec<MonthRow> {
    let mut groups: BTreeMap<u32, Vec<[f64; 5]>> = BTreeMap::new();
    for (date, s) in records {
        groups.entry(date.month()).or_default().push(s.values());
    }
    groups
        .into_iter()
        .map(|(month, rows)| {
            let n = rows.len();
            let mut mean = [0.0; 5];
            let mut se = [0.0; 5];
            for m in 0..5 {
                mean[m] = rows.iter().map(|r| r[m]).sum::<f64>() / n as f64;
                if n > 1 {
                    let var = rows.iter().map(|r| (r[m] - mean[m]).powi(2)).sum::<f64>() / (n - 1) as f64;
                    se[m] = (var / n as f64).sqrt();
                }
            }
            MonthRow {
                month,
                n,
                mean: Scores::from_values(mean),
                se: Scores::from_values(se),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub overall: Scores,
    /// Scores at lead times 1..=τ.
    pub by_lead: Vec<Scores>,
    pub by_month: Vec<MonthRow>,
}

pub fn evaluate(pairs: &[ForecastPair], mask: &RegionMask) -> Result<MetricReport, MetricError> {
    let stats = all_stats(pairs, mask)?;
    let tau = pairs[0].lead_times;
    let overall = combine(stats.iter().flatten());
    let by_lead = (0..tau).map(|l| combine(stats.iter().map(|s| &s[l]))).collect();
    let records: Vec<(NaiveDate, Scores)> = pairs
        .iter()
        .zip(&stats)
        .map(|(p, s)| (p.issue_date, combine(s.iter())))
        .collect();
    Ok(MetricReport {
        overall,
        by_lead,
        by_month: monthly_aggregate(&records),
    })
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.17e}")
}

impl MetricReport {
    /// `metric,lead_time,value` with the overall scores.
    pub fn overall_csv(&self) -> String {
        let mut out = String::from("metric,lead_time,value\n");
        for (name, v) in METRIC_NAMES.iter().zip(self.overall.values()) {
            let _ = writeln!(out, "{name},all,{}", fmt_f64(v));
        }
        out
    }

    pub fn by_lead_csv(&self) -> String {
        let mut out = String::from("metric,lead_time,value\n");
        for (l, s) in self.by_lead.iter().enumerate() {
            for (name, v) in METRIC_NAMES.iter().zip(s.values()) {
                let _ = writeln!(out, "{name},{},{}", l + 1, fmt_f64(v));
            }
        }
        out
    }

    pub fn by_month_csv(&self) -> String {
        let mut out = String::from("month,metric,n,mean,se\n");
        for row in &self.by_month {
            for (m, name) in METRIC_NAMES.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{name},{},{},{}",
                    row.month,
                    row.n,
                    fmt_f64(row.mean.values()[m]),
                    fmt_f64(row.se.values()[m])
                );
            }
        }
        out
    }
}
