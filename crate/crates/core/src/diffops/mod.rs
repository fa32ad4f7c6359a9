//! Differentiable array operations with reverse-mode gradients.
//!
//! The op set is closed: convolution (stride 1 "same" or strided "valid"),
//! 2×2 transposed convolution, 2×2 max pooling, batch norm, ReLU, sigmoid,
//! channel concatenation, elementwise add/scale/multiply, sums and a masked
//! binary cross-entropy on logits. Every op is recorded on a [`Tape`] and
//! differentiated by [`Tape::backward`]; [`grad_check`] compares the result
//! against central finite differences.

mod kernels;
mod tape;
mod tensor;

use thiserror::Error;

pub use kernels::{
    bce_with_logit, conv2d_forward, conv_transpose2x2_forward, maxpool2_forward, sigmoid,
    ConvGeom, Padding,
};
pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Builds a scalar function of the tape inputs for [`grad_check`].
pub trait ScalarFn: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, DiffError> {}
impl<F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, DiffError>> ScalarFn for F {}

fn evaluate(f: &impl ScalarFn, inputs: &[Tensor<f64>]) -> Result<f64, DiffError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(DiffError::Shape("checked function must be scalar".into()));
    }
    let v = v.data()[0];
    if !v.is_finite() {
        return Err(DiffError::NonFinite("checked function value".into()));
    }
    Ok(v)
}

/// Relative discrepancy used by the checker: `|a-b| / max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Maximum relative error between the reverse-mode gradient of `f` and
/// central differences with step `h`, over every coordinate of every input.
pub fn grad_check(f: impl ScalarFn, inputs: &[Tensor<f64>], h: f64) -> Result<f64, DiffError> {
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |k| (i, k)))
        .collect();
    grad_check_at(f, inputs, &coords, h)
}

/// Like [`grad_check`] but only at the listed `(input, flat index)` coordinates.
pub fn grad_check_at(
    f: impl ScalarFn,
    inputs: &[Tensor<f64>],
    coords: &[(usize, usize)],
    h: f64,
) -> Result<f64, DiffError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).data()[0].is_finite() {
        return Err(DiffError::NonFinite("checked function value".into()));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();
    drop(tape);

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for &(i, k) in coords {
        let orig = inputs[i].data()[k];
        probe[i].data_mut()[k] = orig + h;
        let up = evaluate(&f, &probe)?;
        probe[i].data_mut()[k] = orig - h;
        let down = evaluate(&f, &probe)?;
        probe[i].data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(rel_err(analytic[i].data()[k], numeric));
    }
    Ok(worst)
}
