//! Adam with bias correction, plus global-norm gradient clipping.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;

use crate::{Error, Real, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moments, zero-initialised, and the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One in-place Adam update.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Shape(format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let c1 = T::one() - T::lit(Float::powi(cfg.beta1, t));
    let c2 = T::one() - T::lit(Float::powi(cfg.beta2, t));
    let lr = T::lit(cfg.lr);
    let eps = T::lit(cfg.eps);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((pi, &gi), mi), vi) in
            p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut())
        {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *pi = *pi - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm: f64 = Float::sqrt(grads.iter().flat_map(|g| g.data().iter()).map(|v| v.as_f64() * v.as_f64()).sum::<f64>());
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = vec![Tensor::new(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let g = vec![Tensor::zeros(&[3])];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn first_step_matches_hand_formula() {
        let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
        let g = [0.3f64, -2.0, 1e-3];
        let mut p = vec![Tensor::new(vec![3], vec![0.0; 3]).unwrap()];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::new(vec![3], g.to_vec()).unwrap()], &mut st, &cfg).unwrap();
        for (i, &gi) in g.iter().enumerate() {
            // mhat = g, vhat = g^2 after bias correction
            let m = (1.0 - 0.9) * gi / (1.0 - 0.9);
            let v = (1.0 - 0.999) * gi * gi / (1.0 - 0.999);
            let expected = -0.01 * m / (v.sqrt() + 1e-8);
            assert!((p[0].data()[i] - expected).abs() < 1e-15);
            assert!((p[0].data()[i] + 0.01 * gi / (gi.abs() + 1e-8)).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_from_same_state() {
        let p0 = vec![Tensor::new(vec![2], vec![0.1f32, 0.2]).unwrap()];
        let g = vec![Tensor::new(vec![2], vec![0.7f32, -0.1]).unwrap()];
        let st0 = AdamState::new(&p0);
        let run = || {
            let (mut p, mut s) = (p0.clone(), st0.clone());
            adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
            (p, s)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::<f64>::zeros(&[2])];
        let mut st = AdamState::new(&p);
        let g = vec![Tensor::zeros(&[3])];
        assert!(matches!(adam_step(&mut p, &g, &mut st, &AdamConfig::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Tensor::new(vec![2], vec![3.0f64, 4.0]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
    }
}
