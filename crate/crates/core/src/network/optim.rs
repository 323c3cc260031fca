use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with decoupled weight decay over one slice of the parameter vector.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub weight_decay: f64,
    range: Range<usize>,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(range: Range<usize>, weight_decay: f64, config: AdamConfig) -> Self {
        let n = range.len();
        Self { config, weight_decay, range, m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0 }
    }

    pub fn range(&self) -> Range<usize> {
        self.range.clone()
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Updates `params[range]` from `grads[range]` with learning rate `lr`.
    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let bc1 = T::lit(1.0 - c.beta1.powi(self.t));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.t));
        let lr_t = T::lit(lr);
        let decay = T::one() - T::lit(lr * self.weight_decay);
        let eps = T::lit(c.eps);
        let r = self.range.clone();
        for (((p, &g), m), v) in params[r.clone()].iter_mut().zip(&grads[r]).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p = *p * decay - lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Divides the learning rate by a constant factor when the monitored loss
/// has not improved by a relative margin for `patience` epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    /// Relative improvement needed to count as progress.
    pub threshold: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, threshold: f64) -> Self {
        Self { lr, factor, patience, threshold, best: f64::INFINITY, bad_epochs: 0 }
    }

    /// Feeds one epoch's loss; returns true when the rate was reduced.
    pub fn step(&mut self, loss: f64) -> bool {
        if loss < self.best * (1.0 - self.threshold) {
            self.best = loss;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.lr *= self.factor;
            self.bad_epochs = 0;
            return true;
        }
        false
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stagnant_loss_reduces_once_at_epoch_eleven() {
        let mut s = PlateauScheduler::new(1e-3, 0.1, 10, 0.01);
        let reductions: Vec<usize> = (1..=20).filter(|_| s.step(0.5)).collect();
        assert_eq!(reductions, vec![11]);
        assert!((s.lr - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn small_improvements_do_not_count() {
        let mut s = PlateauScheduler::new(1.0, 0.1, 3, 0.01);
        assert!(!s.step(1.0));
        assert!(!s.step(0.995));
        assert!(!s.step(0.991));
        assert!(s.step(0.9905));
        assert!(!s.step(0.5));
        assert_eq!(s.best(), 0.5);
    }

    #[test]
    fn zero_rate_and_decay_leave_parameters() {
        let mut adam = Adam::<f64>::new(0..3, 0.0, AdamConfig::default());
        let mut p = vec![0.1, -0.2, 0.3];
        adam.step(&mut p, &[1.0, 2.0, -3.0], 0.0);
        assert_eq!(p, vec![0.1, -0.2, 0.3]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = Adam::<f64>::new(1..3, 0.0, AdamConfig::default());
        let mut p = vec![5.0, 1.0, 1.0];
        adam.step(&mut p, &[9.0, 0.5, -4.0], 0.01);
        assert_eq!(p[0], 5.0);
        assert!((p[1] - 0.99).abs() < 1e-9 && (p[2] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut adam = Adam::<f64>::new(0..1, 0.5, AdamConfig::default());
        let mut p = vec![2.0];
        adam.step(&mut p, &[0.0], 0.1);
        assert!((p[0] - 2.0 * 0.95).abs() < 1e-12);
    }
}
