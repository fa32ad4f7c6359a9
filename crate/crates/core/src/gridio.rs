//! Gridded data model, the GSEQ on-disk format and the preprocessing steps
//! that bring heterogeneous rasters onto one grid and a weekly cadence.
//!
//! GSEQ layout (all integers little-endian):
//!
//! ```text
//! 47 53 45 51 01        magic "GSEQ" + version 1
//! u32 Tlen, u32 H, u32 W
//! u8  cadence           0 = daily, 1 = weekly
//! u32 start date        days since 1970-01-01
//! f32 × Tlen·H·W        values, frame-major then row-major
//! u8  × Tlen·H·W        validity, 0 or 1
//! ```
//!
//! A region mask file uses the same header with `Tlen = 1` followed only by
//! the `H·W` validity bytes.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 5] = [0x47, 0x53, 0x45, 0x51, 0x01];
const HEADER_LEN: usize = 5 + 4 * 3 + 1 + 4;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cadence {
    Daily,
    Weekly,
}

impl Cadence {
    pub fn step_days(self) -> u64 {
        match self {
            Cadence::Daily => 1,
            Cadence::Weekly => 7,
        }
    }

    fn code(self) -> u8 {
        match self {
            Cadence::Daily => 0,
            Cadence::Weekly => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self, GridError> {
        match c {
            0 => Ok(Cadence::Daily),
            1 => Ok(Cadence::Weekly),
            other => Err(GridError::Format(format!("unknown cadence code {other}"))),
        }
    }
}

pub fn unix_epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid epoch")
}

pub fn epoch_day(date: NaiveDate) -> Result<u32, GridError> {
    u32::try_from((date - unix_epoch()).num_days())
        .map_err(|_| GridError::Invalid(format!("date {date} precedes 1970-01-01")))
}

pub fn from_epoch_day(days: u32) -> Result<NaiveDate, GridError> {
    unix_epoch()
        .checked_add_days(Days::new(days as u64))
        .ok_or_else(|| GridError::Format(format!("epoch day {days} out of range")))
}

/// Row-major `H×W` field.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    h: usize,
    w: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn new(h: usize, w: usize, data: Vec<T>) -> Result<Self, GridError> {
        if data.len() != h * w {
            return Err(GridError::Shape(format!(
                "{} values for a {h}x{w} grid",
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, v: T) -> Self {
        Self {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn get(&self, i: usize, j: usize) -> &T {
        &self.data[i * self.w + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.w + j] = v;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }
}

/// Time-ordered stack of `H×W` fields with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSequence {
    tlen: usize,
    h: usize,
    w: usize,
    values: Vec<f32>,
    valid: Vec<bool>,
    start_date: NaiveDate,
    cadence: Cadence,
}

impl GridSequence {
    pub fn new(
        tlen: usize,
        h: usize,
        w: usize,
        values: Vec<f32>,
        valid: Vec<bool>,
        start_date: NaiveDate,
        cadence: Cadence,
    ) -> Result<Self, GridError> {
        if tlen == 0 || h == 0 || w == 0 {
            return Err(GridError::Shape(format!("empty sequence {tlen}x{h}x{w}")));
        }
        let n = tlen
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| GridError::Shape("dimension overflow".into()))?;
        if values.len() != n || valid.len() != n {
            return Err(GridError::Shape(format!(
                "{} values / {} flags for {tlen}x{h}x{w}",
                values.len(),
                valid.len()
            )));
        }
        if let Some(k) = (0..n).find(|&k| valid[k] && !values[k].is_finite()) {
            return Err(GridError::Invalid(format!("non-finite valid value at index {k}")));
        }
        Ok(Self {
            tlen,
            h,
            w,
            values,
            valid,
            start_date,
            cadence,
        })
    }

    /// Sequence with every pixel valid.
    pub fn from_values(
        tlen: usize,
        h: usize,
        w: usize,
        values: Vec<f32>,
        start_date: NaiveDate,
        cadence: Cadence,
    ) -> Result<Self, GridError> {
        let valid = vec![true; values.len()];
        Self::new(tlen, h, w, values, valid, start_date, cadence)
    }

    pub fn len(&self) -> usize {
        self.tlen
    }

    pub fn is_empty(&self) -> bool {
        self.tlen == 0
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn start_date(&self) -> NaiveDate {
        self.start_date
    }

    pub fn cadence(&self) -> Cadence {
        self.cadence
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.plane()..(t + 1) * self.plane()]
    }

    pub fn frame_valid(&self, t: usize) -> &[bool] {
        &self.valid[t * self.plane()..(t + 1) * self.plane()]
    }

    pub fn date(&self, t: usize) -> NaiveDate {
        self.start_date + Days::new(t as u64 * self.cadence.step_days())
    }

    /// Index of the frame dated `date`, if it falls exactly on the cadence.
    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        let days = (date - self.start_date).num_days();
        let step = self.cadence.step_days() as i64;
        (days >= 0 && days % step == 0 && ((days / step) as usize) < self.tlen)
            .then_some((days / step) as usize)
    }

    /// True when every valid pixel lies in `[0, 1]` (the SIC range).
    pub fn is_unit_range(&self) -> bool {
        self.values
            .iter()
            .zip(&self.valid)
            .all(|(&v, &ok)| !ok || (0.0..=1.0).contains(&v))
    }
}

/// Evaluable (non-land) pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    h: usize,
    w: usize,
    ocean: Vec<bool>,
    count: usize,
}

impl RegionMask {
    pub fn new(h: usize, w: usize, ocean: Vec<bool>) -> Result<Self, GridError> {
        if ocean.len() != h * w {
            return Err(GridError::Shape(format!(
                "{} flags for a {h}x{w} mask",
                ocean.len()
            )));
        }
        let count = ocean.iter().filter(|&&o| o).count();
        if count == 0 {
            return Err(GridError::Invalid("region mask selects no pixels".into()));
        }
        Ok(Self { h, w, ocean, count })
    }

    pub fn full(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            ocean: vec![true; h * w],
            count: h * w,
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn ocean(&self) -> &[bool] {
        &self.ocean
    }

    pub fn contains(&self, k: usize) -> bool {
        self.ocean[k]
    }
}

/// Brightness temperature and the two sea-ice-age groups at one time point.
#[derive(Clone, Debug, PartialEq)]
pub struct AncillaryStack {
    pub tb: Grid<f32>,
    pub sia_fyi: Grid<bool>,
    pub sia_myi: Grid<bool>,
}

impl AncillaryStack {
    pub fn new(tb: Grid<f32>, sia_fyi: Grid<bool>, sia_myi: Grid<bool>) -> Result<Self, GridError> {
        let dims = (tb.h, tb.w);
        if (sia_fyi.h, sia_fyi.w) != dims || (sia_myi.h, sia_myi.w) != dims {
            return Err(GridError::Shape("ancillary fields on different grids".into()));
        }
        if tb.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(GridError::Invalid("TB must be normalized to [0,1]".into()));
        }
        if sia_fyi.data.iter().zip(&sia_myi.data).any(|(&f, &m)| f && m) {
            return Err(GridError::Invalid("ice-age groups overlap".into()));
        }
        Ok(Self {
            tb,
            sia_fyi,
            sia_myi,
        })
    }
}

/// Nearest source cell for every target pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordMap {
    h: usize,
    w: usize,
    src_h: usize,
    src_w: usize,
    src_index: Vec<(u32, u32)>,
}

impl CoordMap {
    pub fn new(
        h: usize,
        w: usize,
        src_h: usize,
        src_w: usize,
        src_index: Vec<(u32, u32)>,
    ) -> Result<Self, GridError> {
        if src_index.len() != h * w {
            return Err(GridError::Shape(format!(
                "{} indices for a {h}x{w} target",
                src_index.len()
            )));
        }
        if let Some(&(r, c)) = src_index
            .iter()
            .find(|&&(r, c)| r as usize >= src_h || c as usize >= src_w)
        {
            return Err(GridError::Invalid(format!(
                "source index ({r},{c}) outside {src_h}x{src_w}"
            )));
        }
        Ok(Self {
            h,
            w,
            src_h,
            src_w,
            src_index,
        })
    }

    pub fn identity(h: usize, w: usize) -> Self {
        let src_index = (0..h * w).map(|k| ((k / w) as u32, (k % w) as u32)).collect();
        Self {
            h,
            w,
            src_h: h,
            src_w: w,
            src_index,
        }
    }
}

fn write_header(
    out: &mut Vec<u8>,
    tlen: usize,
    h: usize,
    w: usize,
    cadence: Cadence,
    start: NaiveDate,
) -> Result<(), GridError> {
    let dim = |v: usize| {
        u32::try_from(v).map_err(|_| GridError::Shape(format!("dimension {v} exceeds u32")))
    };
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&dim(tlen)?.to_le_bytes());
    out.extend_from_slice(&dim(h)?.to_le_bytes());
    out.extend_from_slice(&dim(w)?.to_le_bytes());
    out.push(cadence.code());
    out.extend_from_slice(&epoch_day(start)?.to_le_bytes());
    Ok(())
}

struct Header {
    tlen: usize,
    h: usize,
    w: usize,
    cadence: Cadence,
    start: NaiveDate,
}

fn read_header(bytes: &[u8]) -> Result<Header, GridError> {
    if bytes.len() < HEADER_LEN {
        return Err(GridError::Format("truncated header".into()));
    }
    if bytes[..5] != MAGIC {
        return Err(GridError::Format(format!("bad magic {:02x?}", &bytes[..5])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    Ok(Header {
        tlen: u32_at(5) as usize,
        h: u32_at(9) as usize,
        w: u32_at(13) as usize,
        cadence: Cadence::from_code(bytes[17])?,
        start: from_epoch_day(u32_at(18))?,
    })
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn encode_gridseq(seq: &GridSequence) -> Result<Vec<u8>, GridError> {
    let n = seq.values.len();
    let mut out = Vec::with_capacity(HEADER_LEN + 5 * n);
    write_header(&mut out, seq.tlen, seq.h, seq.w, seq.cadence, seq.start_date)?;
    for v in &seq.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(seq.valid.iter().map(|&b| b as u8));
    Ok(out)
}

pub fn decode_gridseq(bytes: &[u8]) -> Result<GridSequence, GridError> {
    let hd = read_header(bytes)?;
    let n = hd
        .tlen
        .checked_mul(hd.h)
        .and_then(|v| v.checked_mul(hd.w))
        .filter(|n| n.checked_mul(5).is_some())
        .ok_or_else(|| GridError::Format("dimension overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != 5 * n {
        return Err(GridError::Format(format!(
            "payload of {} bytes, expected {}",
            payload.len(),
            5 * n
        )));
    }
    let values = payload[..4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let valid = payload[4 * n..]
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(GridError::Format(format!("validity byte {other}"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    GridSequence::new(hd.tlen, hd.h, hd.w, values, valid, hd.start, hd.cadence)
        .map_err(|e| GridError::Format(e.to_string()))
}

pub fn save_gridseq(path: &Path, seq: &GridSequence) -> Result<(), GridError> {
    write_atomic(path, &encode_gridseq(seq)?)?;
    Ok(())
}

pub fn load_gridseq(path: &Path) -> Result<GridSequence, GridError> {
    decode_gridseq(&fs::read(path)?)
}

pub fn save_region_mask(path: &Path, mask: &RegionMask) -> Result<(), GridError> {
    let mut out = Vec::with_capacity(HEADER_LEN + mask.ocean.len());
    write_header(&mut out, 1, mask.h, mask.w, Cadence::Weekly, unix_epoch())?;
    out.extend(mask.ocean.iter().map(|&b| b as u8));
    write_atomic(path, &out)?;
    Ok(())
}

pub fn load_region_mask(path: &Path) -> Result<RegionMask, GridError> {
    let bytes = fs::read(path)?;
    let hd = read_header(&bytes)?;
    if hd.tlen != 1 {
        return Err(GridError::Format(format!("mask file with Tlen {}", hd.tlen)));
    }
    let n = hd
        .h
        .checked_mul(hd.w)
        .ok_or_else(|| GridError::Format("dimension overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != n {
        return Err(GridError::Format(format!(
            "mask payload of {} bytes, expected {n}",
            payload.len()
        )));
    }
    let ocean = payload.iter().map(|&b| b != 0).collect();
    RegionMask::new(hd.h, hd.w, ocean).map_err(|e| GridError::Format(e.to_string()))
}

/// Averages complete 7-day blocks of a daily sequence over their valid days.
/// A pixel with no valid day in a week is invalid in the output; a trailing
/// partial week is dropped.
pub fn weekly_average(daily: &GridSequence) -> Result<GridSequence, GridError> {
    if daily.cadence != Cadence::Daily {
        return Err(GridError::Invalid("weekly_average expects a daily sequence".into()));
    }
    let weeks = daily.tlen / 7;
    if weeks == 0 {
        return Err(GridError::Invalid(format!(
            "{} days do not cover a week",
            daily.tlen
        )));
    }
    let plane = daily.plane();
    let mut values = vec![0.0f32; weeks * plane];
    let mut valid = vec![false; weeks * plane];
    for wk in 0..weeks {
        for p in 0..plane {
            let mut sum = 0.0f64;
            let mut n = 0u32;
            for d in 7 * wk..7 * wk + 7 {
                let k = d * plane + p;
                if daily.valid[k] {
                    sum += daily.values[k] as f64;
                    n += 1;
                }
            }
            if n > 0 {
                values[wk * plane + p] = (sum / n as f64) as f32;
                valid[wk * plane + p] = true;
            }
        }
    }
    GridSequence::new(
        weeks,
        daily.h,
        daily.w,
        values,
        valid,
        daily.start_date,
        Cadence::Weekly,
    )
}

/// Replaces invalid pixels by the value of the nearest valid pixel
/// (Euclidean pixel distance, ties to the earliest pixel in row-major order).
pub fn fill_missing_nearest(field: &Grid<f32>, valid: &Grid<bool>) -> Result<Grid<f32>, GridError> {
    let (h, w) = (field.h, field.w);
    if (valid.h, valid.w) != (h, w) {
        return Err(GridError::Shape("field and validity grids differ".into()));
    }
    // valid columns per row, ascending
    let rows: Vec<Vec<usize>> = (0..h)
        .map(|i| (0..w).filter(|&j| valid.data[i * w + j]).collect())
        .collect();
    if rows.iter().all(Vec::is_empty) {
        return Err(GridError::Invalid("no valid pixel to fill from".into()));
    }
    let mut out = field.clone();
    for i in 0..h {
        for j in 0..w {
            if valid.data[i * w + j] {
                continue;
            }
            // best = (squared distance, row-major index)
            let mut best: Option<(usize, usize)> = None;
            for di in 0..h {
                if let Some((d2, _)) = best {
                    if di * di > d2 {
                        break;
                    }
                }
                let mut candidate_rows = vec![];
                if di <= i {
                    candidate_rows.push(i - di);
                }
                if di > 0 && i + di < h {
                    candidate_rows.push(i + di);
                }
                for r in candidate_rows {
                    let cols = &rows[r];
                    let pos = cols.partition_point(|&c| c < j);
                    for c in [pos.checked_sub(1).map(|p| cols[p]), cols.get(pos).copied()]
                        .into_iter()
                        .flatten()
                    {
                        let dc = c.abs_diff(j);
                        let key = (di * di + dc * dc, r * w + c);
                        if best.map_or(true, |b| key < b) {
                            best = Some(key);
                        }
                    }
                }
            }
            let (_, src) = best.expect("some valid pixel exists");
            out.data[i * w + j] = field.data[src];
        }
    }
    Ok(out)
}

/// `out[i][j] = src[map[i][j]]`.
pub fn regrid_nearest<T: Clone>(src: &Grid<T>, map: &CoordMap) -> Result<Grid<T>, GridError> {
    if (src.h, src.w) != (map.src_h, map.src_w) {
        return Err(GridError::Shape(format!(
            "map built for {}x{} applied to {}x{}",
            map.src_h, map.src_w, src.h, src.w
        )));
    }
    let data = map
        .src_index
        .iter()
        .map(|&(r, c)| src.data[r as usize * src.w + c as usize].clone())
        .collect();
    Grid::new(map.h, map.w, data)
}

/// Splits an ice-age field (years, 0 = no ice) into first-year (age 1) and
/// multi-year (age ≥ 2) masks.
pub fn sia_two_group(age: &Grid<i32>) -> Result<(Grid<bool>, Grid<bool>), GridError> {
    if let Some(bad) = age.data.iter().find(|a| !(0..=16).contains(*a)) {
        return Err(GridError::Invalid(format!("ice age {bad} outside 0..=16")));
    }
    let fyi = age.data.iter().map(|&a| a == 1).collect();
    let myi = age.data.iter().map(|&a| a >= 2).collect();
    Ok((Grid::new(age.h, age.w, fyi)?, Grid::new(age.h, age.w, myi)?))
}

/// Min-max bounds over the valid pixels of frames `range`.
pub fn minmax(seq: &GridSequence, range: std::ops::Range<usize>) -> Result<(f32, f32), GridError> {
    let plane = seq.plane();
    let (lo, hi) = seq.values[range.start * plane..range.end * plane]
        .iter()
        .zip(&seq.valid[range.start * plane..range.end * plane])
        .filter(|(_, &ok)| ok)
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), (&v, _)| {
            (lo.min(v), hi.max(v))
        });
    if lo > hi {
        return Err(GridError::Invalid("no valid pixel in range".into()));
    }
    Ok((lo, hi))
}

/// `v ↦ clamp((v - lo) / (hi - lo), 0, 1)`.
pub fn normalize_tb(tb: &GridSequence, stats: (f32, f32)) -> Result<GridSequence, GridError> {
    let (lo, hi) = stats;
    if !(hi > lo) {
        return Err(GridError::Invalid(format!("degenerate TB range [{lo}, {hi}]")));
    }
    let span = hi - lo;
    let mut out = tb.clone();
    for v in &mut out.values {
        *v = ((*v - lo) / span).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// File names inside a dataset directory.
pub const SIC_FILE: &str = "sic.gseq";
pub const TB_FILE: &str = "tb.gseq";
pub const FYI_FILE: &str = "sia_fyi.gseq";
pub const MYI_FILE: &str = "sia_myi.gseq";
pub const MASK_FILE: &str = "mask.gmask";

/// Aligned weekly SIC, normalized TB and ice-age groups (stored as 0/1) on
/// one grid, with the evaluable-ocean mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sic: GridSequence,
    pub tb: GridSequence,
    pub sia_fyi: GridSequence,
    pub sia_myi: GridSequence,
    pub mask: RegionMask,
}

impl Dataset {
    pub fn new(
        sic: GridSequence,
        tb: GridSequence,
        sia_fyi: GridSequence,
        sia_myi: GridSequence,
        mask: RegionMask,
    ) -> Result<Self, GridError> {
        for (name, seq) in [("tb", &tb), ("sia_fyi", &sia_fyi), ("sia_myi", &sia_myi)] {
            if (seq.tlen, seq.h, seq.w, seq.start_date, seq.cadence)
                != (sic.tlen, sic.h, sic.w, sic.start_date, sic.cadence)
            {
                return Err(GridError::Shape(format!("{name} is not aligned with sic")));
            }
        }
        if (mask.h, mask.w) != (sic.h, sic.w) {
            return Err(GridError::Shape("mask is not on the sic grid".into()));
        }
        if sic.cadence != Cadence::Weekly {
            return Err(GridError::Invalid("datasets are weekly".into()));
        }
        let flags = |s: &GridSequence| s.values.iter().all(|&v| v == 0.0 || v == 1.0);
        if !flags(&sia_fyi) || !flags(&sia_myi) {
            return Err(GridError::Invalid("ice-age groups must be 0/1".into()));
        }
        if sia_fyi.values.iter().zip(&sia_myi.values).any(|(&f, &m)| f == 1.0 && m == 1.0) {
            return Err(GridError::Invalid("ice-age groups overlap".into()));
        }
        Ok(Self {
            sic,
            tb,
            sia_fyi,
            sia_myi,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.sic.tlen
    }

    pub fn is_empty(&self) -> bool {
        self.sic.tlen == 0
    }

    pub fn ancillary(&self, t: usize) -> Result<AncillaryStack, GridError> {
        let (h, w) = (self.sic.h, self.sic.w);
        let flags = |s: &GridSequence| Grid::new(h, w, s.frame(t).iter().map(|&v| v == 1.0).collect());
        AncillaryStack::new(
            Grid::new(h, w, self.tb.frame(t).to_vec())?,
            flags(&self.sia_fyi)?,
            flags(&self.sia_myi)?,
        )
    }

    pub fn save_dir(&self, dir: &Path) -> Result<(), GridError> {
        fs::create_dir_all(dir)?;
        save_gridseq(&dir.join(SIC_FILE), &self.sic)?;
        save_gridseq(&dir.join(TB_FILE), &self.tb)?;
        save_gridseq(&dir.join(FYI_FILE), &self.sia_fyi)?;
        save_gridseq(&dir.join(MYI_FILE), &self.sia_myi)?;
        save_region_mask(&dir.join(MASK_FILE), &self.mask)
    }

    pub fn load_dir(dir: &Path) -> Result<Self, GridError> {
        Self::new(
            load_gridseq(&dir.join(SIC_FILE))?,
            load_gridseq(&dir.join(TB_FILE))?,
            load_gridseq(&dir.join(FYI_FILE))?,
            load_gridseq(&dir.join(MYI_FILE))?,
            load_region_mask(&dir.join(MASK_FILE))?,
        )
    }
}
