use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use super::HarnessError;

/// Inclusive calendar-date interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d <= self.end
    }

    pub fn overlaps(&self, o: &DateRange) -> bool {
        self.start <= o.end && o.start <= self.end
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    /// 1-based.
    pub index: usize,
    pub train: DateRange,
    pub val: DateRange,
    pub test: DateRange,
}

/// Years of training, validation and test data per fold, and the shift
/// between consecutive folds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitLayout {
    pub train_years: i32,
    pub val_years: i32,
    pub test_years: i32,
    pub offset_years: i32,
}

pub const MAX_FOLDS: usize = 4;
/// Spans of at least this many calendar years use the full layout.
pub const FULL_LAYOUT_YEARS: i32 = 24;
/// Shortest span accepted, in calendar years.
pub const MIN_SPAN_YEARS: i32 = 8;

impl SplitLayout {
    pub const FULL: SplitLayout = SplitLayout {
        train_years: 11,
        val_years: 1,
        test_years: 3,
        offset_years: 3,
    };

    /// Layout for a span of `years` calendar years: the full 11/1/3 layout
    /// with 3-year offsets, or for shorter spans a 5/1/2 layout whose offset
    /// is the full offset scaled by `years / 24`.
    pub fn for_span(years: i32) -> Result<Self, HarnessError> {
        if years >= FULL_LAYOUT_YEARS {
            return Ok(Self::FULL);
        }
        if years < MIN_SPAN_YEARS {
            return Err(HarnessError::InsufficientSpan { years });
        }
        let offset = ((3 * years) as f64 / FULL_LAYOUT_YEARS as f64).round().max(1.0) as i32;
        Ok(SplitLayout {
            train_years: 5,
            val_years: 1,
            test_years: 2,
            offset_years: offset,
        })
    }
}

fn jan1(y: i32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, 1, 1).expect("valid year")
}

fn dec31(y: i32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, 12, 31).expect("valid year")
}

/// Calendar-year sliding-window folds over `[start, end]`. Fold `k` begins
/// `offset·(k-1)` years after the first year; ranges are clipped to the data
/// span and a fold is kept while its test period starts inside the span.
pub fn make_splits(start: NaiveDate, end: NaiveDate) -> Result<Vec<FoldSpec>, HarnessError> {
    if end < start {
        return Err(HarnessError::InsufficientSpan { years: 0 });
    }
    let years = end.year() - start.year() + 1;
    let layout = SplitLayout::for_span(years)?;
    let mut folds = Vec::new();
    for k in 0..MAX_FOLDS {
        let first = start.year() + layout.offset_years * k as i32;
        let val_year = first + layout.train_years;
        let test_first = val_year + layout.val_years;
        let test_last = test_first + layout.test_years - 1;
        if jan1(test_first) > end {
            break;
        }
        folds.push(FoldSpec {
            index: k + 1,
            train: DateRange {
                start: jan1(first).max(start),
                end: dec31(val_year - 1),
            },
            val: DateRange {
                start: jan1(val_year),
                end: dec31(test_first - 1),
            },
            test: DateRange {
                start: jan1(test_first),
                end: dec31(test_last).min(end),
            },
        });
    }
    if folds.is_empty() {
        return Err(HarnessError::InsufficientSpan { years });
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    #[test]
    fn full_span_gives_four_folds() {
        let folds = make_splits(d(1998, 6, 22), d(2021, 6, 14)).unwrap();
        assert_eq!(folds.len(), 4);
        let f1 = folds[0];
        assert_eq!(f1.train, DateRange { start: d(1998, 6, 22), end: d(2008, 12, 31) });
        assert_eq!(f1.val, DateRange { start: d(2009, 1, 1), end: d(2009, 12, 31) });
        assert_eq!(f1.test, DateRange { start: d(2010, 1, 1), end: d(2012, 12, 31) });
        let f4 = folds[3];
        assert_eq!(f4.train, DateRange { start: d(2007, 1, 1), end: d(2017, 12, 31) });
        assert_eq!(f4.val.start.year(), 2018);
        assert_eq!(f4.test, DateRange { start: d(2019, 1, 1), end: d(2021, 6, 14) });
        for pair in folds.windows(2) {
            assert!(!pair[0].test.overlaps(&pair[1].test));
            assert_eq!(pair[1].train.start.year() - pair[0].train.start.year(), 3);
        }
    }

    #[test]
    fn eight_year_span_uses_scaled_layout() {
        let folds = make_splits(d(2000, 1, 3), d(2007, 12, 24)).unwrap();
        assert_eq!(folds.len(), 2);
        assert_eq!(folds[0].train.end, d(2004, 12, 31));
        assert_eq!(folds[0].val.start, d(2005, 1, 1));
        assert_eq!(folds[0].test, DateRange { start: d(2006, 1, 1), end: d(2007, 12, 24) });
        assert_eq!(folds[1].test, DateRange { start: d(2007, 1, 1), end: d(2007, 12, 24) });
    }

    #[test]
    fn ranges_are_disjoint_and_consecutive() {
        for (s, e) in [(d(1998, 6, 22), d(2021, 6, 14)), (d(2000, 1, 3), d(2011, 3, 1)), (d(1990, 1, 1), d(2030, 1, 1))] {
            for f in make_splits(s, e).unwrap() {
                assert_eq!(f.train.end.succ_opt().unwrap(), f.val.start);
                assert_eq!(f.val.end.succ_opt().unwrap(), f.test.start);
                assert!(f.train.start >= s && f.test.end <= e);
            }
        }
    }

    #[test]
    fn short_spans_are_rejected() {
        assert!(matches!(
            make_splits(d(2000, 1, 1), d(2006, 12, 31)),
            Err(HarnessError::InsufficientSpan { years: 7 })
        ));
        assert!(make_splits(d(2000, 1, 1), d(1999, 1, 1)).is_err());
    }
}
