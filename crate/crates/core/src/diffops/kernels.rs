//! Forward and backward kernels over plain tensors. The tape in `tape.rs`
//! records which of these to replay; nothing here knows about graphs.

use rayon::prelude::*;

use super::tensor::{Scalar, Tensor};
use super::DiffError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding that preserves `H×W` (stride 1 only). Even kernels put
    /// the extra row/column at the bottom/right.
    Same,
    /// No padding.
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        x: [usize; 4],
        weight: [usize; 4],
        stride: usize,
        padding: Padding,
    ) -> Result<Self, DiffError> {
        let [_, cin, h, w] = x;
        let [_, wcin, kh, kw] = weight;
        if wcin != cin {
            return Err(DiffError::Shape(format!(
                "conv expects {wcin} input channels, got {cin}"
            )));
        }
        if !(1..=3).contains(&kh) || !(1..=3).contains(&kw) {
            return Err(DiffError::Shape(format!("unsupported kernel {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(DiffError::Shape("stride must be positive".into()));
        }
        let (pad_top, pad_left, ho, wo) = match padding {
            Padding::Same => {
                if stride != 1 {
                    return Err(DiffError::Shape("same padding requires stride 1".into()));
                }
                ((kh - 1) / 2, (kw - 1) / 2, h, w)
            }
            Padding::Valid => {
                if h < kh || w < kw {
                    return Err(DiffError::Shape(format!(
                        "input {h}x{w} smaller than kernel {kh}x{kw}"
                    )));
                }
                (0, 0, (h - kh) / stride + 1, (w - kw) / stride + 1)
            }
        };
        Ok(Self {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
            ho,
            wo,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    /// Source coordinate for output position `o` and kernel tap `k` along one axis.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let p = (o * stride + k).checked_sub(pad)?;
        (p < extent).then_some(p)
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oi in 0..g.ho {
                    let Some(si) = ConvGeom::src(oi, ki, g.stride, g.pad_top, g.h) else {
                        dst[oi * g.wo..(oi + 1) * g.wo].fill(T::zero());
                        continue;
                    };
                    let src_row = &x[(c * g.h + si) * g.w..(c * g.h + si + 1) * g.w];
                    for oj in 0..g.wo {
                        dst[oi * g.wo + oj] = match ConvGeom::src(oj, kj, g.stride, g.pad_left, g.w)
                        {
                            Some(sj) => src_row[sj],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oi in 0..g.ho {
                    let Some(si) = ConvGeom::src(oi, ki, g.stride, g.pad_top, g.h) else {
                        continue;
                    };
                    let base = (c * g.h + si) * g.w;
                    for oj in 0..g.wo {
                        if let Some(sj) = ConvGeom::src(oj, kj, g.stride, g.pad_left, g.w) {
                            dx[base + sj] += src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Scalar>(bias: &Tensor<T>, cout: usize) -> Result<(), DiffError> {
    if bias.len() != cout {
        return Err(DiffError::Shape(format!(
            "bias has {} entries for {cout} output channels",
            bias.len()
        )));
    }
    Ok(())
}

/// Cross-correlation of `x` (`N×Cin×H×W`) with `weight` (`Cout×Cin×kh×kw`) plus bias.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>, DiffError> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, padding)?;
    let cout = weight.shape()[0];
    check_bias(bias, cout)?;
    let n = x.shape()[0];
    let mut out = Tensor::zeros([n, cout, g.ho, g.wo]);
    let plane = g.out_plane();
    let item_out = cout * plane;
    if item_out == 0 {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(item_out)
        .enumerate()
        .for_each(|(i, y)| {
            for (c, b) in bias.data().iter().enumerate() {
                y[c * plane..(c + 1) * plane].fill(*b);
            }
            let xi = x.item(i);
            if g.is_pointwise() {
                T::gemm(cout, g.cin, plane, T::one(), weight.data(), false, xi, false, T::one(), y);
            } else {
                let mut cols = vec![T::zero(); g.patch_len() * plane];
                im2col(xi, &g, &mut cols);
                T::gemm(
                    cout,
                    g.patch_len(),
                    plane,
                    T::one(),
                    weight.data(),
                    false,
                    &cols,
                    false,
                    T::one(),
                    y,
                );
            }
        });
    Ok(out)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dweight: Tensor<T>,
    pub dbias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    padding: Padding,
    need_dx: bool,
) -> Result<ConvGrads<T>, DiffError> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, padding)?;
    let cout = weight.shape()[0];
    let n = x.shape()[0];
    let plane = g.out_plane();
    let patch = g.patch_len();

    let partials: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = x.item(i);
            let dyi = dy.item(i);
            let mut dw = vec![T::zero(); cout * patch];
            let db: Vec<T> = (0..cout)
                .map(|c| dyi[c * plane..(c + 1) * plane].iter().copied().sum())
                .collect();
            let mut dxi = Vec::new();
            if g.is_pointwise() {
                T::gemm(cout, plane, patch, T::one(), dyi, false, xi, true, T::zero(), &mut dw);
                if need_dx {
                    dxi = vec![T::zero(); patch * plane];
                    T::gemm(
                        patch,
                        cout,
                        plane,
                        T::one(),
                        weight.data(),
                        true,
                        dyi,
                        false,
                        T::zero(),
                        &mut dxi,
                    );
                }
            } else {
                let mut cols = vec![T::zero(); patch * plane];
                im2col(xi, &g, &mut cols);
                T::gemm(cout, plane, patch, T::one(), dyi, false, &cols, true, T::zero(), &mut dw);
                if need_dx {
                    T::gemm(
                        patch,
                        cout,
                        plane,
                        T::one(),
                        weight.data(),
                        true,
                        dyi,
                        false,
                        T::zero(),
                        &mut cols,
                    );
                    dxi = vec![T::zero(); g.cin * g.h * g.w];
                    col2im(&cols, &g, &mut dxi);
                }
            }
            (dxi, dw, db)
        })
        .collect();

    // fixed-order reduction keeps results independent of thread count
    let mut dweight = Tensor::zeros(weight.shape());
    let mut dbias = Tensor::zeros([cout, 1, 1, 1]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    for (i, (dxi, dw, db)) in partials.into_iter().enumerate() {
        for (a, b) in dweight.data_mut().iter_mut().zip(dw) {
            *a += b;
        }
        for (a, b) in dbias.data_mut().iter_mut().zip(db) {
            *a += b;
        }
        if let Some(dx) = dx.as_mut() {
            dx.item_mut(i).copy_from_slice(&dxi);
        }
    }
    Ok(ConvGrads { dx, dweight, dbias })
}

fn check_transpose<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>) -> Result<usize, DiffError> {
    let [cin, cout, kh, kw] = weight.shape();
    if (kh, kw) != (2, 2) {
        return Err(DiffError::Shape(format!(
            "transposed convolution needs a 2x2 kernel, got {kh}x{kw}"
        )));
    }
    if x.shape()[1] != cin {
        return Err(DiffError::Shape(format!(
            "transposed conv expects {cin} input channels, got {}",
            x.shape()[1]
        )));
    }
    Ok(cout)
}

/// Stride-2 transposed convolution with a 2×2 kernel; `weight` is laid out
/// `Cin×Cout×2×2`, so the same array is the weight of the adjoint
/// stride-2 `conv2d` (which maps `Cout` channels back to `Cin`).
pub fn conv_transpose2x2_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, DiffError> {
    let cout = check_transpose(x, weight)?;
    check_bias(bias, cout)?;
    let [n, cin, h, w] = x.shape();
    let plane = h * w;
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    let item_out = cout * ho * wo;
    if item_out == 0 {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(item_out)
        .enumerate()
        .for_each(|(i, y)| {
            let mut cols = vec![T::zero(); cout * 4 * plane];
            T::gemm(cout * 4, cin, plane, T::one(), weight.data(), true, x.item(i), false, T::zero(), &mut cols);
            for co in 0..cout {
                let b = bias.data()[co];
                for a in 0..2 {
                    for bb in 0..2 {
                        let row = &cols[(co * 4 + a * 2 + bb) * plane..][..plane];
                        for r in 0..h {
                            let dst = &mut y[(co * ho + 2 * r + a) * wo..][..wo];
                            for c in 0..w {
                                dst[2 * c + bb] = row[r * w + c] + b;
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

pub fn conv_transpose2x2_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> Result<ConvGrads<T>, DiffError> {
    let cout = check_transpose(x, weight)?;
    let [n, cin, h, w] = x.shape();
    let plane = h * w;
    let wo = 2 * w;
    let partials: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let dyi = dy.item(i);
            let mut dcols = vec![T::zero(); cout * 4 * plane];
            let mut db = vec![T::zero(); cout];
            for co in 0..cout {
                for a in 0..2 {
                    for bb in 0..2 {
                        let row = &mut dcols[(co * 4 + a * 2 + bb) * plane..][..plane];
                        for r in 0..h {
                            let src = &dyi[(co * 2 * h + 2 * r + a) * wo..][..wo];
                            for c in 0..w {
                                row[r * w + c] = src[2 * c + bb];
                            }
                        }
                        db[co] += row.iter().copied().sum();
                    }
                }
            }
            let mut dw = vec![T::zero(); cin * cout * 4];
            T::gemm(cin, plane, cout * 4, T::one(), x.item(i), false, &dcols, true, T::zero(), &mut dw);
            let mut dxi = Vec::new();
            if need_dx {
                dxi = vec![T::zero(); cin * plane];
                T::gemm(cin, cout * 4, plane, T::one(), weight.data(), false, &dcols, false, T::zero(), &mut dxi);
            }
            (dxi, dw, db)
        })
        .collect();
    let mut dweight = Tensor::zeros(weight.shape());
    let mut dbias = Tensor::zeros([cout, 1, 1, 1]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    for (i, (dxi, dw, db)) in partials.into_iter().enumerate() {
        for (a, b) in dweight.data_mut().iter_mut().zip(dw) {
            *a += b;
        }
        for (a, b) in dbias.data_mut().iter_mut().zip(db) {
            *a += b;
        }
        if let Some(dx) = dx.as_mut() {
            dx.item_mut(i).copy_from_slice(&dxi);
        }
    }
    Ok(ConvGrads { dx, dweight, dbias })
}

/// 2×2 max pooling. Returns the pooled tensor and, per output element, the
/// flat input index that won (first in row-major order on ties).
pub fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>), DiffError> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(DiffError::Shape(format!("max pooling needs even H and W, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let mut arg = vec![0u32; n * c * ho * wo];
    let src = x.data();
    for p in 0..n * c {
        for i in 0..ho {
            for j in 0..wo {
                let base = p * h * w + 2 * i * w + 2 * j;
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                let o = (p * ho + i) * wo + j;
                out.data_mut()[o] = src[best];
                arg[o] = best as u32;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2_backward<T: Scalar>(x_shape: [usize; 4], arg: &[u32], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    for (&a, &g) in arg.iter().zip(dy.data()) {
        dx.data_mut()[a as usize] += g;
    }
    dx
}

/// Per-channel statistics over `(N, H, W)`: mean and biased variance.
pub fn channel_stats<T: Scalar>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let [n, c, _, _] = x.shape();
    let plane = x.plane_len();
    let count = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            let o = x.offset(i, ch, 0, 0);
            s += x.data()[o..o + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = s / count;
        let mut q = 0.0;
        for i in 0..n {
            let o = x.offset(i, ch, 0, 0);
            q += x.data()[o..o + plane]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = q / count;
    }
    (mean, var)
}

/// `y = (x - mean[c]) * inv_std[c] * gamma[c] + beta[c]`; also returns the
/// normalized input `xhat`.
pub fn affine_normalize<T: Scalar>(
    x: &Tensor<T>,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let [n, c, _, _] = x.shape();
    let plane = x.plane_len();
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    for i in 0..n {
        for ch in 0..c {
            let o = x.offset(i, ch, 0, 0);
            let m = T::lit(mean[ch]);
            let s = T::lit(inv_std[ch]);
            let (g, b) = (gamma.data()[ch], beta.data()[ch]);
            for k in o..o + plane {
                let xh = (x.data()[k] - m) * s;
                xhat.data_mut()[k] = xh;
                y.data_mut()[k] = xh * g + b;
            }
        }
    }
    (y, xhat)
}

/// Per-channel `Σ dy` and `Σ dy·xhat`.
pub fn channel_dot<T: Scalar>(dy: &Tensor<T>, xhat: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let [n, c, _, _] = dy.shape();
    let plane = dy.plane_len();
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let o = dy.offset(i, ch, 0, 0);
            for k in o..o + plane {
                let g = dy.data()[k].as_f64();
                sum_dy[ch] += g;
                sum_dy_xhat[ch] += g * xhat.data()[k].as_f64();
            }
        }
    }
    (sum_dy, sum_dy_xhat)
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `max(x,0) - x·y + ln(1 + e^{-|x|})`, the logit form of binary cross-entropy.
#[inline]
pub fn bce_with_logit(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}
