//! Finite-difference gradient checker with central and five-point stencils.

use crate::error::{Error, Result};

pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Relative error used by [`finite_diff_check`]:
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Difference formula used for each partial derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, truncation error O(h^2).
    #[default]
    Central,
    /// Four-evaluation formula with truncation error O(h^4). A larger `h`
    /// then keeps roundoff well below the 1e-8 floor of [`relative_error`],
    /// which matters for partials that are exactly zero.
    FivePoint,
    /// Ridders' extrapolation: central differences at steps shrinking from
    /// a starting step, extrapolated to zero step. Tables are started at
    /// `eps`, `eps / 10` and `eps / 100` and the estimate with the smallest
    /// error bound wins, so flat directions get large steps and sharply
    /// curved ones small steps.
    Ridders,
}

/// Ridders' method for one partial; `at(offset)` evaluates the function
/// with the coordinate shifted by `offset`. Returns the estimate and its
/// error bound.
fn ridders(mut at: impl FnMut(f64) -> Result<f64>, h0: f64) -> Result<(f64, f64)> {
    const SHRINK: f64 = 1.4;
    const SHRINK2: f64 = SHRINK * SHRINK;
    const TABLE: usize = 10;
    const SAFE: f64 = 2.0;
    let mut h = h0;
    let mut prev: Vec<f64> = vec![(at(h)? - at(-h)?) / (2.0 * h)];
    let mut best = prev[0];
    let mut err = f64::INFINITY;
    for _ in 1..TABLE {
        h /= SHRINK;
        let mut row = vec![(at(h)? - at(-h)?) / (2.0 * h)];
        let mut fac = SHRINK2;
        for j in 1..=prev.len() {
            let v = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
            fac *= SHRINK2;
            let e = (v - row[j - 1]).abs().max((v - prev[j - 1]).abs());
            if e <= err {
                err = e;
                best = v;
            }
            row.push(v);
        }
        let diverging = (row[row.len() - 1] - prev[prev.len() - 1]).abs() >= SAFE * err;
        prev = row;
        if diverging {
            break;
        }
    }
    Ok((best, err))
}

/// Numerical gradient of `f` at `point` by central differences.
pub fn numeric_gradient<F>(f: F, point: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    numeric_gradient_with(f, point, eps, Stencil::Central)
}

pub fn numeric_gradient_with<F>(mut f: F, point: &[f64], eps: f64, stencil: Stencil) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::Argument(format!("finite-difference eps must be > 0, got {eps}")));
    }
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        let mut at = |offset: f64| {
            x[i] = orig + offset;
            f(&x)
        };
        let d = match stencil {
            Stencil::Central => (at(eps)? - at(-eps)?) / (2.0 * eps),
            Stencil::FivePoint => {
                (8.0 * (at(eps)? - at(-eps)?) - (at(2.0 * eps)? - at(-2.0 * eps)?)) / (12.0 * eps)
            }
            Stencil::Ridders => {
                let mut best = ridders(&mut at, eps)?;
                for h0 in [eps / 10.0, eps / 100.0] {
                    let r = ridders(&mut at, h0)?;
                    if r.1 < best.1 {
                        best = r;
                    }
                }
                best.0
            }
        };
        x[i] = orig;
        out.push(d);
    }
    Ok(out)
}

/// Max relative error between `analytic` and central differences of `f`.
pub fn finite_diff_check<F>(f: F, point: &[f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    finite_diff_check_with(f, point, analytic, eps, Stencil::Central)
}

pub fn finite_diff_check_with<F>(f: F, point: &[f64], analytic: &[f64], eps: f64, stencil: Stencil) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if analytic.len() != point.len() {
        return Err(Error::Argument(format!(
            "{} analytic partials for a {}-dimensional point",
            analytic.len(),
            point.len()
        )));
    }
    let numeric = numeric_gradient_with(f, point, eps, stencil)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}
