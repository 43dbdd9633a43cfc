use serde::{Deserialize, Serialize};

use crate::config::OptimConfig;
use crate::diffcore::Tensor;

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &OptimConfig) -> Self {
        AdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter. `grads[i]` must match `params[i]`.
    ///
    /// # Panics
    /// If the gradient list does not line up with the parameters.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.len(), g.len(), "gradient shape of parameter {i}");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.values_mut().iter_mut().enumerate() {
                *x -= self.lr * self.weight_decay * *x;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opt(lr: f64, wd: f64) -> AdamW {
        AdamW::new(&OptimConfig {
            lr,
            weight_decay: wd,
            ..OptimConfig::default()
        })
    }

    #[test]
    fn zero_gradient_no_decay_leaves_params() {
        let mut p = vec![Tensor::from_rows(&[vec![1.5, -2.0]])];
        let mut o = opt(0.1, 0.0);
        for _ in 0..5 {
            o.step(&mut p, &[vec![0.0, 0.0]]);
        }
        assert_eq!(p[0].values(), &[1.5, -2.0]);
    }

    #[test]
    fn constant_gradient_steps_by_lr() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut o = opt(0.01, 0.0);
        let mut prev = 0.0;
        for _ in 0..200 {
            o.step(&mut p, &[vec![3.0]]);
            let x = p[0].item();
            assert!(((prev - x) - 0.01).abs() < 1e-9);
            prev = x;
        }
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut g = vec![vec![0.3]];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g[0][0], 0.3);
    }
}
