use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers for a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Vec<f64>> = params.into_iter().map(|p| vec![0.0; p.len()]).collect();
        let v = m.clone();
        Self { m, v, step: 0 }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Argument(format!(
            "adam: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.len() {
            return Err(Error::Argument(format!(
                "adam: param {i} has shape {:?}, grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = Tensor::from_vec(vec![1.5, -2.0]);
        let before = p.clone();
        let mut st = AdamState::new([&p]);
        for _ in 0..10 {
            adam_step(&mut [&mut p], &[Tensor::zeros(&[2])], &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Tensor::from_vec(vec![0.0, 0.0]);
        let mut st = AdamState::new([&p]);
        let cfg = AdamConfig::with_lr(0.01);
        adam_step(&mut [&mut p], &[Tensor::from_vec(vec![3.0, -0.5])], &mut st, &cfg).unwrap();
        assert!((p.data()[0] + 0.01).abs() < 1e-9);
        assert!((p.data()[1] - 0.01).abs() < 1e-9);
    }

    /// Scalar re-derivation of the Adam recurrence, kept independent of `adam_step`.
    fn reference_quadratic(steps: usize, lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut p, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=steps {
            let g = 2.0 * (p - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            p -= lr * mh / (vh.sqrt() + eps);
        }
        p
    }

    #[test]
    fn quadratic_converges_like_scalar_recurrence() {
        let mut p = Tensor::from_vec(vec![0.0]);
        let mut st = AdamState::new([&p]);
        let cfg = AdamConfig::with_lr(0.1);
        for _ in 0..100 {
            let g = Tensor::from_vec(vec![2.0 * (p.data()[0] - 3.0)]);
            adam_step(&mut [&mut p], &[g], &mut st, &cfg).unwrap();
        }
        let reference = reference_quadratic(100, 0.1);
        assert_eq!(p.data()[0], reference);
        assert!((p.data()[0] - 3.0).abs() < 0.05, "p = {}", p.data()[0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::from_vec(vec![0.0, 0.0]);
        let mut st = AdamState::new([&p]);
        let r = adam_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut st, &AdamConfig::default());
        assert!(matches!(r, Err(Error::Argument(_))));
    }
}
