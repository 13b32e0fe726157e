use serde::{Deserialize, Serialize};

use super::params::Params;
use super::tensor::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0) }
    }
}

/// Adaptive-moment optimiser with bias correction and global-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    m: Params<T>,
    v: Params<T>,
    t: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// Gradient norm actually applied.
    pub clipped_norm: f64,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &Params<T>, config: AdamConfig) -> Self {
        Self { config, m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Clips `grads` in place and applies one update to `params`.
    pub fn step(&mut self, params: &mut Params<T>, grads: &mut Params<T>) -> Result<StepStats> {
        for (name, g) in grads.named() {
            if !g.all_finite() {
                return Err(Error::NanGuard(name));
            }
        }
        let grad_norm = grads.global_norm().f64();
        let mut clipped_norm = grad_norm;
        if let Some(max) = self.config.clip_norm {
            if grad_norm > max {
                grads.scale(T::of(max / grad_norm));
                clipped_norm = grads.global_norm().f64();
            }
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let step = T::of(c.lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(c.eps);
        let ms = self.m.named_mut();
        let vs = self.v.named_mut();
        let ps = params.named_mut();
        let gs = grads.named();
        for (((( _, p), (_, g)), (_, m)), (_, v)) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (T::one() - b1) * gi;
                v.data[i] = b2 * v.data[i] + (T::one() - b2) * gi * gi;
                let denom = (v.data[i] * inv_bc2).sqrt() + eps;
                p.data[i] = p.data[i] - step * m.data[i] / denom;
            }
        }
        Ok(StepStats { grad_norm, clipped_norm })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::ProblemKind;
    use crate::neural::ModelConfig;

    fn tiny() -> Params<f64> {
        let cfg = ModelConfig { d: 4, d_ff: 8, layers: 1, ..ModelConfig::full(ProblemKind::Tsp) };
        Params::init(cfg, 3)
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut p = tiny();
        let before = p.clone();
        let mut g = p.zeros_like();
        let mut adam = Adam::new(&p, AdamConfig::default());
        adam.step(&mut p, &mut g).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn clipping_to_unit_norm() {
        let mut p = tiny();
        let mut g = p.zeros_like();
        g.reduction.w_key.data[0] = 6.0;
        g.local.w_first.data[3] = 8.0;
        let mut adam = Adam::new(&p, AdamConfig::default());
        let stats = adam.step(&mut p, &mut g).unwrap();
        assert!((stats.grad_norm - 10.0).abs() < 1e-12);
        assert!((stats.clipped_norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nan_guard_names_parameter() {
        let mut p = tiny();
        let mut g = p.zeros_like();
        g.local.layers[0].ff_w2.data[1] = f64::NAN;
        let mut adam = Adam::new(&p, AdamConfig::default());
        match adam.step(&mut p, &mut g) {
            Err(Error::NanGuard(name)) => assert_eq!(name, "local.layer0.ff_w2"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn matches_scalar_recurrence() {
        // Independent scalar Adam for a constant gradient g over two steps.
        let g = 0.3f64;
        let (lr, b1, b2, eps) = (1e-2, 0.9, 0.999, 1e-8);
        let mut x = 0.0f64;
        let (mut m, mut v) = (0.0, 0.0);
        let mut expected = Vec::new();
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            let before = x;
            x -= lr * mhat / (vhat.sqrt() + eps);
            expected.push(x - before);
        }

        let mut p = tiny();
        let start = p.local.alpha.data[0];
        let mut adam = Adam::new(&p, AdamConfig { lr, clip_norm: None, ..AdamConfig::default() });
        let mut prev = start;
        for e in expected {
            let mut grads = p.zeros_like();
            grads.local.alpha.data[0] = g;
            adam.step(&mut p, &mut grads).unwrap();
            let now = p.local.alpha.data[0];
            assert!(((now - prev) - e).abs() < 1e-15, "{} vs {e}", now - prev);
            prev = now;
        }
    }
}
