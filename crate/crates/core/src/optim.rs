//! Adam with global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            lr: 1e-3,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, len: usize) -> Self {
        Adam {
            cfg,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update.
    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let b1 = T::lit(self.cfg.beta1);
        let b2 = T::lit(self.cfg.beta2);
        let c1 = T::lit(1.0 - self.cfg.beta1.powi(self.step as i32));
        let c2 = T::lit(1.0 - self.cfg.beta2.powi(self.step as i32));
        let lr = T::lit(self.cfg.lr);
        let eps = T::lit(self.cfg.eps);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

/// Euclidean norm of a flat gradient, accumulated in 64-bit.
pub fn grad_norm<T: Scalar>(grad: &[T]) -> f64 {
    grad.iter().map(|g| g.as_f64().powi(2)).sum::<f64>().sqrt()
}

/// Rescales `grad` so its norm is at most `max_norm`; returns the norm before
/// clipping.
pub fn clip_grad_norm<T: Scalar>(grad: &mut [T], max_norm: f64) -> f64 {
    let norm = grad_norm(grad);
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}
