//! Scalar and vector primitives with their hand-derived derivatives.
//!
//! The tape in [`super::tape`] calls into these for both directions; they are
//! also exposed directly for callers that only need a forward value.

use crate::error::{ensure_finite, Error, Result};

/// LayerNorm epsilon used everywhere in the harness.
pub const LN_EPS: f64 = 1e-6;

/// Parameter-free LayerNorm with population variance.
pub fn layer_norm(x: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Argument("layer_norm of an empty vector".into()));
    }
    if eps <= 0.0 {
        return Err(Error::Argument(format!("layer_norm eps must be > 0, got {eps}")));
    }
    ensure_finite(x, "layer_norm input")?;
    let mut out = vec![0.0; x.len()];
    layer_norm_into(x, eps, &mut out);
    Ok(out)
}

/// Writes the normalized row into `out` and returns `1/sqrt(var + eps)`.
pub(crate) fn layer_norm_into(x: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - mean) * inv_std;
    }
    inv_std
}

/// Backward of [`layer_norm_into`] given the normalized output `y`.
pub(crate) fn layer_norm_backward(y: &[f64], inv_std: f64, grad_y: &[f64], grad_x: &mut [f64]) {
    let n = y.len() as f64;
    let mean_g = grad_y.iter().sum::<f64>() / n;
    let mean_gy = grad_y.iter().zip(y).map(|(g, v)| g * v).sum::<f64>() / n;
    for ((gx, g), v) in grad_x.iter_mut().zip(grad_y).zip(y) {
        *gx += inv_std * (g - mean_g - v * mean_gy);
    }
}

pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Argument("softmax of an empty vector".into()));
    }
    ensure_finite(x, "softmax input")?;
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// `grad_x += J^T grad_y` for `y = softmax(x)`.
pub(crate) fn softmax_backward(y: &[f64], grad_y: &[f64], grad_x: &mut [f64]) {
    let dot: f64 = y.iter().zip(grad_y).map(|(a, b)| a * b).sum();
    for ((gx, &yi), &gi) in grad_x.iter_mut().zip(y).zip(grad_y) {
        *gx += yi * (gi - dot);
    }
}

/// Which GELU formulation to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GeluKind {
    /// `x * Phi(x)` with the exact error function.
    #[default]
    Exact,
    /// The `tanh` approximation.
    Tanh,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

pub fn gelu(x: f64) -> f64 {
    gelu_with(x, GeluKind::Exact)
}

pub fn gelu_with(x: f64, kind: GeluKind) -> f64 {
    match kind {
        GeluKind::Exact => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
        GeluKind::Tanh => {
            let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        }
    }
}

pub fn gelu_grad(x: f64, kind: GeluKind) -> f64 {
    match kind {
        GeluKind::Exact => {
            let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
            let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
            cdf + x * pdf
        }
        GeluKind::Tanh => {
            let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
            let t = u.tanh();
            let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        }
    }
}

/// Cosine similarity; zero-norm inputs are a numeric-domain error.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine similarity of a zero-norm vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Masked multi-head scaled dot-product attention.
///
/// `q, k, v` are `[t, d]` row-major; `mask[j] == false` removes key `j` from
/// every query's softmax. Returns the `[t, d]` output and the
/// `[heads, t, t]` attention probabilities (zero at masked keys).
pub fn masked_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    mask: &[bool],
    t: usize,
    d: usize,
    heads: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("dim {d} not divisible by {heads} heads")));
    }
    if mask.len() != t {
        return Err(Error::Argument(format!("mask length {} != sequence length {t}", mask.len())));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Argument("attention with every position masked".into()));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; t * d];
    let mut probs = vec![0.0; heads * t * t];
    let mut scores = vec![0.0; t];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let qi = &q[i * d + off..i * d + off + dh];
            let mut max = f64::NEG_INFINITY;
            for j in 0..t {
                if !mask[j] {
                    continue;
                }
                let kj = &k[j * d + off..j * d + off + dh];
                let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                scores[j] = s;
                max = max.max(s);
            }
            let mut sum = 0.0;
            for j in 0..t {
                if mask[j] {
                    scores[j] = (scores[j] - max).exp();
                    sum += scores[j];
                }
            }
            let prow = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
            let orow = &mut out[i * d + off..i * d + off + dh];
            for j in 0..t {
                if !mask[j] {
                    continue;
                }
                let p = scores[j] / sum;
                prow[j] = p;
                let vj = &v[j * d + off..j * d + off + dh];
                for (o, x) in orow.iter_mut().zip(vj) {
                    *o += p * x;
                }
            }
        }
    }
    Ok((out, probs))
}

/// Backward of [`masked_attention`]; accumulates into the three gradients.
#[allow(clippy::too_many_arguments)]
pub(crate) fn masked_attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    mask: &[bool],
    grad_out: &[f64],
    t: usize,
    d: usize,
    heads: usize,
    grad_q: &mut [f64],
    grad_k: &mut [f64],
    grad_v: &mut [f64],
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = vec![0.0; t];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let prow = &probs[(h * t + i) * t..(h * t + i + 1) * t];
            let go = &grad_out[i * d + off..i * d + off + dh];
            let mut dot = 0.0;
            for j in 0..t {
                if !mask[j] {
                    continue;
                }
                let vj = &v[j * d + off..j * d + off + dh];
                dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                dot += prow[j] * dp[j];
                let gv = &mut grad_v[j * d + off..j * d + off + dh];
                for (g, x) in gv.iter_mut().zip(go) {
                    *g += prow[j] * x;
                }
            }
            for j in 0..t {
                if !mask[j] {
                    continue;
                }
                let ds = prow[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..dh {
                    grad_q[i * d + off + c] += ds * k[j * d + off + c];
                    grad_k[j * d + off + c] += ds * q[i * d + off + c];
                }
            }
        }
    }
}
