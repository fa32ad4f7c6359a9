//! Deterministic Arctic-like synthetic dataset: a smooth radial ice cap whose
//! radius follows an asymmetric seasonal cycle, a linear trend and a slow
//! interannual anomaly, plus pixel noise, derived TB and ice-age fields, and
//! a coastal land band.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridio::{Cadence, Dataset, GridError, GridSequence, RegionMask};

/// Weeks per seasonal cycle.
pub const SEASON: usize = 52;
/// Threshold above which a pixel counts as icy.
pub const ICE_THRESHOLD: f32 = 0.15;

const SEASON_MAX_WEEK: f64 = 50.0;
const SEASON_MIN_WEEK: f64 = 33.0;
const CAP_R0: f64 = 0.6;
const CAP_AMPLITUDE: f64 = 0.35;
const EDGE_HALF_WIDTH: f64 = 0.1;
const TB_NOISE_SD: f64 = 0.01;
const ANOMALY_CORR: f64 = 0.95;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub n_weeks: usize,
    pub seed: u64,
    /// Change of the normalized cap radius per year.
    pub trend_per_year: f64,
    pub noise_sd: f64,
    /// Stationary standard deviation of the AR(1) radius anomaly.
    pub anomaly_sd: f64,
    pub land_fraction: f64,
    pub start_date: NaiveDate,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            n_weeks: 416,
            seed: 7,
            trend_per_year: -0.005,
            noise_sd: 0.02,
            anomaly_sd: 0.06,
            land_fraction: 0.1,
            start_date: season_origin(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: String| Err(SynthError::Config(m));
        if self.height < 8 || self.width < 8 {
            return err(format!("grid {}x{} is smaller than 8x8", self.height, self.width));
        }
        if self.n_weeks < 64 {
            return err(format!("n_weeks {} < 64", self.n_weeks));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return err("noise_sd must be finite and >= 0".into());
        }
        if !(self.anomaly_sd >= 0.0 && self.anomaly_sd.is_finite()) {
            return err("anomaly_sd must be finite and >= 0".into());
        }
        if !self.trend_per_year.is_finite() {
            return err("trend_per_year must be finite".into());
        }
        if !(0.0..=0.3).contains(&self.land_fraction) {
            return err(format!("land_fraction {} outside [0, 0.3]", self.land_fraction));
        }
        Ok(())
    }
}

/// Monday 2000-01-03, week 0 of the seasonal clock.
pub fn season_origin() -> NaiveDate {
    NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date")
}

/// Week of the seasonal cycle, `0..52`, shared by the generator and the
/// climatology baseline.
pub fn season_week(date: NaiveDate) -> usize {
    let days = (date - season_origin()).num_days();
    days.div_euclid(7).rem_euclid(SEASON as i64) as usize
}

/// Seasonal cycle in `[-1, 1]`: `1` at the maximum week, `-1` at the
/// minimum, linear in between, with a long decline and a short growth season.
pub fn seasonal_cycle(week: f64) -> f64 {
    let season = SEASON as f64;
    let decline = (SEASON_MIN_WEEK - SEASON_MAX_WEEK).rem_euclid(season);
    let since_max = (week - SEASON_MAX_WEEK).rem_euclid(season);
    if since_max < decline {
        1.0 - 2.0 * since_max / decline
    } else {
        -1.0 + 2.0 * (since_max - decline) / (season - decline)
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Normalized distance and angle of a pixel centre from the grid centre.
fn polar(i: usize, j: usize, h: usize, w: usize) -> (f64, f64) {
    let y = (i as f64 + 0.5 - h as f64 / 2.0) / (h as f64 / 2.0);
    let x = (j as f64 + 0.5 - w as f64 / 2.0) / (w as f64 / 2.0);
    ((x * x + y * y).sqrt(), y.atan2(x))
}

/// Ice fraction of the cap of radius `r` at a pixel, before noise.
pub fn cap(dist: f64, angle: f64, r: f64) -> f64 {
    let d = dist * (1.0 + 0.08 * (3.0 * angle).sin());
    1.0 - smoothstep(r - EDGE_HALF_WIDTH, r + EDGE_HALF_WIDTH, d)
}

/// Standard normal draw keyed by `(seed, stream, pixel)`.
fn gaussian(seed: u64, stream: u64, pixel: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(pixel as u128 * 4);
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn tb_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// AR(1) radius anomaly for `len` consecutive weeks, stationary from the start.
fn anomaly_series(cfg: &SynthConfig, len: usize) -> Vec<f64> {
    if cfg.anomaly_sd == 0.0 {
        return vec![0.0; len];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let mut normal = || {
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let innovation = cfg.anomaly_sd * (1.0 - ANOMALY_CORR * ANOMALY_CORR).sqrt();
    let mut a = cfg.anomaly_sd * normal();
    (0..len)
        .map(|_| {
            let cur = a;
            a = ANOMALY_CORR * a + innovation * normal();
            cur
        })
        .collect()
}

/// Land pixels: the outermost `land_fraction` of the grid by a perturbed
/// distance, ties broken by row-major index.
fn land_mask(cfg: &SynthConfig) -> Vec<bool> {
    let (h, w) = (cfg.height, cfg.width);
    let n_land = (cfg.land_fraction * (h * w) as f64).round() as usize;
    let mut order: Vec<(f64, usize)> = (0..h * w)
        .map(|k| {
            let (d, a) = polar(k / w, k % w, h, w);
            (d * (1.0 + 0.1 * (2.0 * a + 1.0).sin()), k)
        })
        .collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    let mut land = vec![false; h * w];
    for &(_, k) in order.iter().take(n_land) {
        land[k] = true;
    }
    land
}

/// Cap radius at week index `t` (relative to `start_date`) given its anomaly.
pub fn radius(cfg: &SynthConfig, t: i64, anomaly: f64) -> f64 {
    let origin_offset = (cfg.start_date - season_origin()).num_days().div_euclid(7);
    let week = (t + origin_offset).rem_euclid(SEASON as i64) as f64;
    let years = t as f64 / SEASON as f64;
    CAP_R0 * (1.0 + CAP_AMPLITUDE * seasonal_cycle(week)) + cfg.trend_per_year * years + anomaly
}

/// SIC frames for `t = -52..n_weeks`, land set to zero.
fn simulate(cfg: &SynthConfig, land: &[bool]) -> Vec<Vec<f32>> {
    let (h, w) = (cfg.height, cfg.width);
    let plane = h * w;
    let polar: Vec<(f64, f64)> = (0..plane).map(|k| polar(k / w, k % w, h, w)).collect();
    let total = cfg.n_weeks + SEASON;
    let anomalies = anomaly_series(cfg, total);
    (0..total)
        .map(|s| {
            let t = s as i64 - SEASON as i64;
            let r = radius(cfg, t, anomalies[s]);
            (0..plane)
                .map(|k| {
                    if land[k] {
                        return 0.0;
                    }
                    let (d, a) = polar[k];
                    let noise = if cfg.noise_sd > 0.0 {
                        cfg.noise_sd * gaussian(cfg.seed, t as u64, k)
                    } else {
                        0.0
                    };
                    (cap(d, a, r) + noise).clamp(0.0, 1.0) as f32
                })
                .collect()
        })
        .collect()
}

/// Generates the dataset. Frames for the 52 weeks before `start_date` are
/// simulated too, so multi-year ice is defined from the first week.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset, SynthError> {
    cfg.validate()?;
    let (h, w, n) = (cfg.height, cfg.width, cfg.n_weeks);
    let plane = h * w;
    let land = land_mask(cfg);
    let frames = simulate(cfg, &land);

    let mut sic = Vec::with_capacity(n * plane);
    let mut tb = Vec::with_capacity(n * plane);
    let mut fyi = Vec::with_capacity(n * plane);
    let mut myi = Vec::with_capacity(n * plane);
    // consecutive icy weeks before the current one, per pixel
    let mut run = vec![0usize; plane];
    for (s, frame) in frames.iter().enumerate() {
        let t = s as i64 - SEASON as i64;
        if t >= 0 {
            for k in 0..plane {
                let v = frame[k];
                let multi = !land[k] && run[k] >= SEASON;
                let icy = !land[k] && v > ICE_THRESHOLD;
                sic.push(v);
                myi.push(multi as u8 as f32);
                fyi.push((icy && !multi) as u8 as f32);
                let noise = TB_NOISE_SD * gaussian(tb_seed(cfg.seed), t as u64, k);
                tb.push((1.0 - v as f64 + noise).clamp(0.0, 1.0) as f32);
            }
        }
        for k in 0..plane {
            run[k] = if frame[k] > ICE_THRESHOLD { run[k] + 1 } else { 0 };
        }
    }
    let seq = |values| GridSequence::from_values(n, h, w, values, cfg.start_date, Cadence::Weekly);
    let mask = RegionMask::new(h, w, land.iter().map(|&l| !l).collect())?;
    Ok(Dataset::new(seq(sic)?, seq(tb)?, seq(fyi)?, seq(myi)?, mask)?)
}
