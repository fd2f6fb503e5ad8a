//! Adam with bias correction, operating on a flat parameter vector.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// 0 means full batch.
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            epochs: 1000,
            learning_rate: 1e-3,
            batch: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    m: Array1<f64>,
    v: Array1<f64>,
    t: usize,
    cfg: AdamConfig,
}

impl Adam {
    pub fn new(dim: usize, cfg: AdamConfig) -> Self {
        Adam {
            m: Array1::zeros(dim),
            v: Array1::zeros(dim),
            t: 0,
            cfg,
        }
    }

    pub fn step(&mut self, theta: &mut Array1<f64>, grad: &Array1<f64>) {
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= self.cfg.learning_rate * m_hat / (v_hat.sqrt() + self.cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converges_on_separable_quadratic() {
        let cfg = AdamConfig {
            epochs: 0,
            learning_rate: 0.05,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(2, cfg);
        let mut theta = Array1::from(vec![3.0, -2.0]);
        for _ in 0..2000 {
            let grad = Array1::from(vec![2.0 * theta[0], 8.0 * theta[1]]);
            adam.step(&mut theta, &grad);
        }
        assert!(theta[0].abs() < 1e-3 && theta[1].abs() < 1e-3);
    }

    #[test]
    fn first_step_size_is_learning_rate() {
        // With bias correction, the first update is lr * sign(grad)
        // (up to eps).
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(1, cfg);
        let mut theta = Array1::from(vec![0.0]);
        adam.step(&mut theta, &Array1::from(vec![12.3]));
        assert!((theta[0] + 0.1).abs() < 1e-6);
    }
}
