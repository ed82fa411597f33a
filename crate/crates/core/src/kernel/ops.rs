//! Forward operations on plain arrays.
//!
//! The tape in [`super::tape`] calls these same functions to compute node
//! values, so a tape forward pass is bitwise identical to the direct one.

use super::{Array, KernelError};

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// `W·x` for `W` of shape `[rows, cols]` and `x` of length `cols`.
pub fn matvec(weights: &Array, x: &Array) -> Result<Array, KernelError> {
    let (rows, cols) = weights.expect_matrix("matvec weights")?;
    let n = x.expect_vector("matvec input")?;
    if n != cols {
        return Err(KernelError::Shape(format!(
            "matvec: weights are {rows}x{cols}, input has length {n}"
        )));
    }
    let xs = x.data();
    let out = (0..rows)
        .map(|r| dot_slices(weights.row(r), xs))
        .collect();
    Ok(Array::vector(out))
}

/// `W·x + b`.
pub fn linear(x: &Array, weights: &Array, bias: &Array) -> Result<Array, KernelError> {
    let wx = matvec(weights, x)?;
    add(&wx, bias)
}

pub(crate) fn dot_slices(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0f32, |acc, (x, y)| acc + x * y)
}

pub fn dot(a: &Array, b: &Array) -> Result<f32, KernelError> {
    same_len(a, b, "dot")?;
    Ok(dot_slices(a.data(), b.data()))
}

fn same_len(a: &Array, b: &Array, what: &str) -> Result<(), KernelError> {
    if a.shape() != b.shape() {
        return Err(KernelError::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn zip_with(a: &Array, b: &Array, what: &str, f: impl Fn(f32, f32) -> f32) -> Result<Array, KernelError> {
    same_len(a, b, what)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Array::new(a.shape().to_vec(), data)
}

fn map(a: &Array, f: impl Fn(f32) -> f32) -> Array {
    let data = a.data().iter().map(|&x| f(x)).collect();
    Array::new(a.shape().to_vec(), data).expect("shape preserved")
}

pub fn add(a: &Array, b: &Array) -> Result<Array, KernelError> {
    zip_with(a, b, "add", |x, y| x + y)
}

pub fn sub(a: &Array, b: &Array) -> Result<Array, KernelError> {
    zip_with(a, b, "sub", |x, y| x - y)
}

pub fn mul(a: &Array, b: &Array) -> Result<Array, KernelError> {
    zip_with(a, b, "mul", |x, y| x * y)
}

pub fn scale(a: &Array, factor: f32) -> Array {
    map(a, |x| x * factor)
}

/// Logistic function, saturating cleanly at both ends.
pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn sigmoid_f32(s: f32) -> f32 {
    sigmoid(s as f64) as f32
}

/// `ln σ(s)` without forming σ(s) first.
pub fn log_sigmoid(s: f32) -> f32 {
    let s = s as f64;
    let v = if s >= 0.0 {
        -(-s).exp().ln_1p()
    } else {
        s - s.exp().ln_1p()
    };
    v as f32
}

pub fn sigmoid_vec(a: &Array) -> Array {
    map(a, sigmoid_f32)
}

pub fn tanh_vec(a: &Array) -> Array {
    map(a, f32::tanh)
}

/// Layer normalization over a vector: `gain ⊙ (x − μ)/√(σ² + ε) + bias`.
pub fn layer_norm(x: &Array, gain: &Array, bias: &Array) -> Result<Array, KernelError> {
    let (normalized, _) = normalize(x)?;
    same_len(x, gain, "layer_norm gain")?;
    same_len(x, bias, "layer_norm bias")?;
    let data = normalized
        .iter()
        .zip(gain.data())
        .zip(bias.data())
        .map(|((&n, &g), &b)| g * n + b)
        .collect();
    Ok(Array::vector(data))
}

/// Returns `(x − μ)/√(σ² + ε)` and `1/√(σ² + ε)`.
pub(crate) fn normalize(x: &Array) -> Result<(Vec<f32>, f32), KernelError> {
    let d = x.expect_vector("layer_norm input")?;
    if d < 2 {
        return Err(KernelError::Shape("layer_norm needs at least 2 features".into()));
    }
    let xs = x.data();
    let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
    let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
    let inv_std = (1.0 / (var + LAYER_NORM_EPS as f64).sqrt()) as f32;
    let mean = mean as f32;
    Ok((xs.iter().map(|&v| (v - mean) * inv_std).collect(), inv_std))
}

/// Numerically stable softmax.
pub fn softmax(scores: &Array) -> Array {
    let xs = scores.data();
    let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = xs.iter().map(|&v| ((v - max) as f64).exp()).collect();
    let total: f64 = exps.iter().sum();
    Array::vector(exps.iter().map(|&e| (e / total) as f32).collect())
}

/// `ln softmax(scores)[index]`.
pub fn log_softmax_at(scores: &Array, index: usize) -> f32 {
    let xs = scores.data();
    let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = xs.iter().map(|&v| ((v - max) as f64).exp()).sum::<f64>().ln();
    ((xs[index] - max) as f64 - lse) as f32
}

pub fn concat(parts: &[&Array]) -> Array {
    let data: Vec<f32> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Array::vector(data)
}

/// Weights of one GRU cell. Input-side matrices are `[hidden, input]`,
/// recurrent ones `[hidden, hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruWeights {
    pub w_update: Array,
    pub u_update: Array,
    pub b_update: Array,
    pub w_reset: Array,
    pub u_reset: Array,
    pub b_reset: Array,
    pub w_candidate: Array,
    pub u_candidate: Array,
    pub b_candidate: Array,
}

impl GruWeights {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = || Array::zeros(&[hidden, input]);
        let u = || Array::zeros(&[hidden, hidden]);
        let b = || Array::zeros(&[hidden]);
        Self {
            w_update: w(),
            u_update: u(),
            b_update: b(),
            w_reset: w(),
            u_reset: u(),
            b_reset: b(),
            w_candidate: w(),
            u_candidate: u(),
            b_candidate: b(),
        }
    }
}

/// One GRU step:
///
/// ```text
/// u = σ(W_u x + b_u + U_u h)
/// r = σ(W_r x + b_r + U_r h)
/// c = tanh(W_c x + b_c + U_c (r ⊙ h))
/// h' = h + u ⊙ (c − h)
/// ```
pub fn gru_cell(x: &Array, h_prev: &Array, w: &GruWeights) -> Result<Array, KernelError> {
    let u = sigmoid_vec(&add(&linear(x, &w.w_update, &w.b_update)?, &matvec(&w.u_update, h_prev)?)?);
    let r = sigmoid_vec(&add(&linear(x, &w.w_reset, &w.b_reset)?, &matvec(&w.u_reset, h_prev)?)?);
    let rh = mul(&r, h_prev)?;
    let c = tanh_vec(&add(
        &linear(x, &w.w_candidate, &w.b_candidate)?,
        &matvec(&w.u_candidate, &rh)?,
    )?);
    add(h_prev, &mul(&u, &sub(&c, h_prev)?)?)
}
