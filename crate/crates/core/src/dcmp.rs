//! Trend/residual decomposition of an input window by a centered moving
//! average over time, with edge-replicating temporal padding.

use thiserror::Error;

use crate::diffops::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum DcmpError {
    #[error("moving-average width {0} must be odd")]
    EvenWidth(usize),
    #[error("moving-average width {width} must satisfy 1 <= K < L = {len}")]
    WidthOutOfRange { width: usize, len: usize },
    #[error("{values} values do not form {len} frames")]
    Ragged { values: usize, len: usize },
}

/// `L` time-ordered `H×W` frames, stored frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Window<T> {
    frames: Vec<T>,
    len: usize,
}

/// Output of [`Window::decompose`]; `trend + residual` reconstructs the input.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition<T> {
    pub trend: Window<T>,
    pub residual: Window<T>,
}

fn check_width(width: usize, len: usize) -> Result<(), DcmpError> {
    if width % 2 == 0 {
        return Err(DcmpError::EvenWidth(width));
    }
    if width >= len {
        return Err(DcmpError::WidthOutOfRange { width, len });
    }
    Ok(())
}

impl<T: Scalar> Window<T> {
    pub fn new(frames: Vec<T>, len: usize) -> Result<Self, DcmpError> {
        if len == 0 || frames.len() % len != 0 {
            return Err(DcmpError::Ragged {
                values: frames.len(),
                len,
            });
        }
        Ok(Self { frames, len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn plane(&self) -> usize {
        self.frames.len() / self.len
    }

    pub fn frame(&self, l: usize) -> &[T] {
        let p = self.plane();
        &self.frames[l * p..(l + 1) * p]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.frames
    }

    pub fn into_vec(self) -> Vec<T> {
        self.frames
    }

    /// Replicates the first and last frame `K/2` times at each end, giving
    /// `L + K - 1` frames. Only oddness of `K` is required here; the
    /// `K < L` bound applies to [`Window::decompose`].
    pub fn tpad(&self, width: usize) -> Result<Window<T>, DcmpError> {
        if width % 2 == 0 {
            return Err(DcmpError::EvenWidth(width));
        }
        let half = width / 2;
        let mut out = Vec::with_capacity(self.frames.len() + (width - 1) * self.plane());
        for _ in 0..half {
            out.extend_from_slice(self.frame(0));
        }
        out.extend_from_slice(&self.frames);
        for _ in 0..half {
            out.extend_from_slice(self.frame(self.len - 1));
        }
        Ok(Window {
            frames: out,
            len: self.len + width - 1,
        })
    }

    pub fn decompose(&self, width: usize) -> Result<Decomposition<T>, DcmpError> {
        let mut trend = vec![T::zero(); self.frames.len()];
        let mut residual = vec![T::zero(); self.frames.len()];
        decompose_into(&self.frames, self.len, width, &mut trend, &mut residual)?;
        Ok(Decomposition {
            trend: Window {
                frames: trend,
                len: self.len,
            },
            residual: Window {
                frames: residual,
                len: self.len,
            },
        })
    }
}

/// Writes the moving-average trend and the residual of `frames` (`len`
/// frames, frame-major) into the output buffers.
///
/// The mean is accumulated as deviations from the center frame, so a
/// constant window yields its own value as trend and an exactly zero
/// residual in any precision.
pub fn decompose_into<T: Scalar>(
    frames: &[T],
    len: usize,
    width: usize,
    trend: &mut [T],
    residual: &mut [T],
) -> Result<(), DcmpError> {
    if len == 0 || frames.len() % len != 0 {
        return Err(DcmpError::Ragged {
            values: frames.len(),
            len,
        });
    }
    check_width(width, len)?;
    let plane = frames.len() / len;
    let half = width as isize / 2;
    let at = |l: isize, p: usize| frames[l.clamp(0, len as isize - 1) as usize * plane + p];
    for l in 0..len {
        for p in 0..plane {
            let center = frames[l * plane + p];
            let dev: f64 = (-half..=half)
                .map(|k| (at(l as isize + k, p) - center).as_f64())
                .sum();
            let t = center + T::lit(dev / width as f64);
            trend[l * plane + p] = t;
            residual[l * plane + p] = center - t;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn win(values: &[f64], plane: usize) -> Window<f64> {
        Window::new(values.to_vec(), values.len() / plane).unwrap()
    }

    #[test]
    fn width_one_is_identity() {
        let w = win(&[0.1, 0.2, 0.3, 0.4], 2);
        assert_eq!(w.tpad(1).unwrap(), w);
        let d = w.decompose(1).unwrap();
        assert_eq!(d.trend, w);
        assert!(d.residual.as_slice().iter().all(|&r| r == 0.0));
    }

    #[test]
    fn tpad_replicates_ends() {
        let w = win(&[1.0, 2.0, 3.0], 1);
        assert_eq!(w.tpad(3).unwrap().as_slice(), &[1.0, 1.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn tpad_random_window() {
        let values: Vec<f64> = (0..12 * 6).map(|i| ((i * 37) % 11) as f64 / 7.0).collect();
        let w = win(&values, 6);
        let p = w.tpad(5).unwrap();
        assert_eq!(p.len(), 16);
        for l in 0..16 {
            let src = (l as usize).saturating_sub(2).min(11);
            assert_eq!(p.frame(l), w.frame(src));
        }
    }

    #[test]
    fn width_errors() {
        let w = win(&[0.0; 12], 1);
        assert_eq!(w.tpad(4), Err(DcmpError::EvenWidth(4)));
        assert_eq!(
            w.decompose(13),
            Err(DcmpError::WidthOutOfRange { width: 13, len: 12 })
        );
        assert!(w.decompose(12).is_err());
    }

    #[test]
    fn constant_window_has_zero_residual() {
        let w = Window::new(vec![0.1f32; 12 * 4], 12).unwrap();
        let d = w.decompose(5).unwrap();
        assert_eq!(d.trend, w);
        assert!(d.residual.as_slice().iter().all(|&r| r == 0.0));
    }

    #[test]
    fn alternating_sequence_with_width_three() {
        let values: Vec<f64> = (0..12).map(|l| (l % 2) as f64).collect();
        let d = win(&values, 1).decompose(3).unwrap();
        for l in 1..11 {
            let want = if l % 2 == 0 { 2.0 / 3.0 } else { 1.0 / 3.0 };
            assert!((d.trend.frame(l)[0] - want).abs() < 1e-15, "l={l}");
        }
        // padded ends: [0,0,1] and [0,1,1]
        assert!((d.trend.frame(0)[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((d.trend.frame(11)[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn affine_sequence_is_its_own_interior_trend() {
        let values: Vec<f64> = (0..12).map(|l| 0.03 * l as f64 + 0.2).collect();
        let d = win(&values, 1).decompose(5).unwrap();
        for l in 2..10 {
            assert!((d.trend.frame(l)[0] - values[l]).abs() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn reconstruction_within_four_ulp(values in prop::collection::vec(0.0f32..1.0, 12 * 9), k in prop::sample::select(vec![1usize, 3, 5, 7, 9, 11])) {
            let w = Window::new(values.clone(), 12).unwrap();
            let d = w.decompose(k).unwrap();
            for ((t, r), x) in d.trend.as_slice().iter().zip(d.residual.as_slice()).zip(&values) {
                let sum = t + r;
                // ulp at the scale of the operands of the final addition
                let ulp = f32::EPSILON * x.abs().max(t.abs()).max(r.abs()).max(f32::MIN_POSITIVE);
                prop_assert!((sum - x).abs() <= 4.0 * ulp);
            }
        }

        #[test]
        fn commutes_with_spatial_permutation(values in prop::collection::vec(-1.0f64..1.0, 12 * 6), shift in 0usize..6) {
            let w = Window::new(values.clone(), 12).unwrap();
            let permuted: Vec<f64> = (0..12 * 6).map(|i| values[(i / 6) * 6 + (i % 6 + shift) % 6]).collect();
            let a = w.decompose(5).unwrap();
            let b = Window::new(permuted, 12).unwrap().decompose(5).unwrap();
            for i in 0..12 * 6 {
                let j = (i / 6) * 6 + (i % 6 + shift) % 6;
                prop_assert_eq!(b.trend.as_slice()[i], a.trend.as_slice()[j]);
            }
        }
    }
}
