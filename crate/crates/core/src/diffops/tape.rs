use std::sync::Arc;

use super::kernels::{self, Padding};
use super::tensor::{Scalar, Tensor};
use super::DiffError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics produced by a training-mode batch norm, for the caller
/// to fold into its running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (`n - 1`) variance, as used for running estimates.
    pub var_unbiased: Vec<f64>,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: Padding,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Var,
    },
    MaxPool {
        x: Var,
        arg: Vec<u32>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<f64>,
        /// batch statistics were used (train mode): the backward pass
        /// includes the dependence of mean and variance on `x`
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    AddScaled {
        a: Var,
        b: Var,
        scale: T,
    },
    Mul(Var, Var),
    Sum(Var),
    MaskedBce {
        logits: Var,
        target: Tensor<T>,
        mask: Arc<Vec<bool>>,
        count: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation for one reverse sweep.
///
/// Values live on the tape until it is dropped; `backward` walks the nodes in
/// reverse insertion order, which is a valid topological order because every
/// op only refers to earlier nodes.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable input whose gradient is collected by `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var, DiffError> {
        let out = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b), stride, padding)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
            &[x, w, b],
        ))
    }

    /// Stride-2, 2×2 transposed convolution (doubles `H` and `W`).
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
        let out = kernels::conv_transpose2x2_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::ConvTranspose { x, w, b }, &[x, w, b]))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var, DiffError> {
        let (out, arg) = kernels::maxpool2_forward(self.value(x))?;
        Ok(self.push(out, Op::MaxPool { x, arg }, &[x]))
    }

    /// Batch norm with statistics of the current batch over `(N, H, W)`.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats), DiffError> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        check_channels(self.value(gamma), self.value(beta), c)?;
        let count = n * h * w;
        if count == 0 {
            return Err(DiffError::Shape("batch norm over an empty batch".into()));
        }
        let (mean, var) = kernels::channel_stats(xv);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, xhat) =
            kernels::affine_normalize(xv, &mean, &inv_std, self.value(gamma), self.value(beta));
        let unbias = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        let stats = BatchStats {
            mean,
            var_unbiased: var.iter().map(|v| v * unbias).collect(),
        };
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var, DiffError> {
        let xv = self.value(x);
        let c = xv.shape()[1];
        check_channels(self.value(gamma), self.value(beta), c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(DiffError::Shape("running statistics do not match channels".into()));
        }
        if xv.is_empty() {
            return Err(DiffError::Shape("batch norm over an empty batch".into()));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, xhat) =
            kernels::affine_normalize(xv, running_mean, &inv_std, self.value(gamma), self.value(beta));
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Channel-axis concatenation, in argument order.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var, DiffError> {
        let first = xs
            .first()
            .ok_or_else(|| DiffError::Shape("concat of no tensors".into()))?;
        let [n, _, h, w] = self.value(*first).shape();
        let mut channels = 0;
        for &v in xs {
            let [vn, vc, vh, vw] = self.value(v).shape();
            if (vn, vh, vw) != (n, h, w) {
                return Err(DiffError::Shape(format!(
                    "concat of {:?} with {:?}",
                    [n, h, w],
                    [vn, vh, vw]
                )));
            }
            channels += vc;
        }
        let mut out = Tensor::zeros([n, channels, h, w]);
        for i in 0..n {
            let mut at = 0;
            let dst = out.item_mut(i);
            for &v in xs {
                let src = self.nodes[v.0].value.item(i);
                dst[at..at + src.len()].copy_from_slice(src);
                at += src.len();
            }
        }
        Ok(self.push(out, Op::Concat(xs.to_vec()), xs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.add_scaled(a, b, T::one())
    }

    /// `a + scale·b`.
    pub fn add_scaled(&mut self, a: Var, b: Var, scale: T) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv)?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x + scale * y)
            .collect();
        let out = Tensor::from_vec(av.shape(), data)?;
        Ok(self.push(out, Op::AddScaled { a, b, scale }, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(av.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `target`,
    /// over every batch item and channel at pixels where `mask` (`H×W`) is set.
    pub fn masked_bce(
        &mut self,
        logits: Var,
        target: Tensor<T>,
        mask: Arc<Vec<bool>>,
    ) -> Result<Var, DiffError> {
        let lv = self.value(logits);
        same_shape(lv, &target)?;
        let plane = lv.plane_len();
        if mask.len() != plane {
            return Err(DiffError::Shape(format!(
                "mask of {} pixels for {plane}-pixel planes",
                mask.len()
            )));
        }
        let cells = mask.iter().filter(|&&m| m).count();
        if cells == 0 {
            return Err(DiffError::InvalidInput("loss mask selects no pixels".into()));
        }
        let planes = lv.len() / plane.max(1);
        let count = cells * planes;
        let mut total = 0.0;
        for p in 0..planes {
            for (k, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                let x = lv.data()[p * plane + k].as_f64();
                if !x.is_finite() {
                    return Err(DiffError::NonFinite("logit".into()));
                }
                total += kernels::bce_with_logit(x, target.data()[p * plane + k].as_f64());
            }
        }
        let loss = T::lit(total / count as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedBce {
                logits,
                target,
                mask,
                count,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>, DiffError> {
        if self.value(output).len() != 1 {
            return Err(DiffError::Shape("backward needs a scalar output".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<(), DiffError> {
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let r = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *padding,
                    needs(x),
                )?;
                if let Some(dx) = r.dx {
                    accumulate(grads, *x, dx);
                }
                self.accumulate_if(grads, *w, r.dweight);
                self.accumulate_if(grads, *b, r.dbias);
            }
            Op::ConvTranspose { x, w, b } => {
                let r = kernels::conv_transpose2x2_backward(self.value(*x), self.value(*w), g, needs(x))?;
                if let Some(dx) = r.dx {
                    accumulate(grads, *x, dx);
                }
                self.accumulate_if(grads, *w, r.dweight);
                self.accumulate_if(grads, *b, r.dbias);
            }
            Op::MaxPool { x, arg } => {
                if needs(x) {
                    let dx = kernels::maxpool2_backward(self.value(*x).shape(), arg, g);
                    accumulate(grads, *x, dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (sum_dy, sum_dy_xhat) = kernels::channel_dot(g, xhat);
                let gv = self.value(*gamma);
                let [n, c, h, w] = g.shape();
                if needs(x) {
                    let m = (n * h * w) as f64;
                    let plane = h * w;
                    let mut dx = Tensor::zeros(g.shape());
                    for i in 0..n {
                        for ch in 0..c {
                            let o = g.offset(i, ch, 0, 0);
                            let scale = gv.data()[ch].as_f64() * inv_std[ch];
                            for k in o..o + plane {
                                let dy = g.data()[k].as_f64();
                                let v = if *batch_stats {
                                    let xh = xhat.data()[k].as_f64();
                                    scale * (dy - sum_dy[ch] / m - xh * sum_dy_xhat[ch] / m)
                                } else {
                                    scale * dy
                                };
                                dx.data_mut()[k] = T::lit(v);
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                let to_tensor = |v: Vec<f64>| {
                    Tensor::from_vec([c, 1, 1, 1], v.into_iter().map(T::lit).collect())
                };
                self.accumulate_if(grads, *gamma, to_tensor(sum_dy_xhat)?);
                self.accumulate_if(grads, *beta, to_tensor(sum_dy)?);
            }
            Op::Relu(x) => {
                if needs(x) {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                        .collect();
                    accumulate(grads, *x, Tensor::from_vec(xv.shape(), data)?);
                }
            }
            Op::Sigmoid(x) => {
                if needs(x) {
                    let data = node
                        .value
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&s, &d)| d * s * (T::one() - s))
                        .collect();
                    accumulate(grads, *x, Tensor::from_vec(node.value.shape(), data)?);
                }
            }
            Op::Concat(xs) => {
                let n = g.shape()[0];
                let mut at = 0;
                for v in xs {
                    let shape = self.value(*v).shape();
                    let len = shape[1] * shape[2] * shape[3];
                    if needs(v) {
                        let mut part = Tensor::zeros(shape);
                        for i in 0..n {
                            part.item_mut(i).copy_from_slice(&g.item(i)[at..at + len]);
                        }
                        accumulate(grads, *v, part);
                    }
                    at += len;
                }
            }
            Op::AddScaled { a, b, scale } => {
                self.accumulate_if(grads, *a, g.clone());
                if needs(b) {
                    accumulate(grads, *b, g.map(|d| d * *scale));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if needs(a) {
                    let data = g.data().iter().zip(bv.data()).map(|(&d, &y)| d * y).collect();
                    accumulate(grads, *a, Tensor::from_vec(av.shape(), data)?);
                }
                if needs(b) {
                    let data = g.data().iter().zip(av.data()).map(|(&d, &x)| d * x).collect();
                    accumulate(grads, *b, Tensor::from_vec(bv.shape(), data)?);
                }
            }
            Op::Sum(x) => {
                if needs(x) {
                    accumulate(grads, *x, Tensor::full(self.value(*x).shape(), g.data()[0]));
                }
            }
            Op::MaskedBce {
                logits,
                target,
                mask,
                count,
            } => {
                if needs(logits) {
                    let lv = self.value(*logits);
                    let plane = lv.plane_len();
                    let scale = g.data()[0] / T::lit(*count as f64);
                    let mut dx = Tensor::zeros(lv.shape());
                    for (k, (&x, &y)) in lv.data().iter().zip(target.data()).enumerate() {
                        if mask[k % plane] {
                            dx.data_mut()[k] = (kernels::sigmoid(x) - y) * scale;
                        }
                    }
                    accumulate(grads, *logits, dx);
                }
            }
        }
        Ok(())
    }

    fn accumulate_if(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if self.nodes[v.0].requires_grad {
            accumulate(grads, v, g);
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.accumulate(&g),
        slot => *slot = Some(g),
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(), DiffError> {
    if a.shape() != b.shape() {
        return Err(DiffError::Shape(format!(
            "shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_channels<T: Scalar>(gamma: &Tensor<T>, beta: &Tensor<T>, c: usize) -> Result<(), DiffError> {
    if gamma.len() != c || beta.len() != c {
        return Err(DiffError::Shape(format!(
            "batch norm affine parameters sized {}/{} for {c} channels",
            gamma.len(),
            beta.len()
        )));
    }
    Ok(())
}

/// Gradients of one reverse sweep, indexed by [`Var`]. Only leaves keep
/// their gradient; intermediate ones are released during the sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when the output does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: [usize; 4]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
