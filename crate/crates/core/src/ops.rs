//! Eager elementwise and reduction functions shared by the tape.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `sqrt(2 / pi)`, the tanh-approximation GELU constant.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh-approximation GELU.
pub const GELU_CUBIC: f64 = 0.044_715;

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// Row-wise `x - logsumexp(x)` with max subtraction.
pub fn log_softmax(x: &Tensor) -> Tensor {
    let k = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// `-log_softmax(logits)[target]` for a single logit vector.
pub fn cross_entropy(logits: &Tensor, target: usize) -> Result<f64> {
    let k = logits.len();
    if target >= k {
        return Err(Error::Label { label: target, classes: k });
    }
    Ok(-log_softmax(logits).data()[target])
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
