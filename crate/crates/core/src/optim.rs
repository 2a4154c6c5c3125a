use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.003,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
/// `v ← μ v + (g + λ θ)`, `θ ← θ − η v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub config: SgdConfig,
    pub velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(config: SgdConfig, num_params: usize) -> Self {
        Self {
            config,
            velocity: vec![0.0; num_params],
        }
    }

    pub fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut f64>, grads: impl Iterator<Item = &'a f64>, lr: f64) {
        let (mu, wd) = (self.config.momentum, self.config.weight_decay);
        for ((p, g), v) in params.zip(grads).zip(self.velocity.iter_mut()) {
            *v = mu * *v + (g + wd * *p);
            *p -= lr * *v;
        }
    }
}

/// Cosine annealing to zero without restarts, evaluated at epoch boundaries.
pub fn cosine_lr(base: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (PI * epoch as f64 / total_epochs as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_values() {
        assert_eq!(cosine_lr(0.003, 0, 60), 0.003);
        assert!((cosine_lr(0.003, 30, 60) - 0.0015).abs() < 1e-15);
        let last = cosine_lr(0.003, 59, 60);
        assert!(last > 0.0 && last < 0.003);
        let lrs: Vec<f64> = (0..60).map(|e| cosine_lr(0.003, e, 60)).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn sgd_matches_hand_computation() {
        let mut opt = Sgd::new(
            SgdConfig {
                lr: 0.1,
                momentum: 0.9,
                weight_decay: 0.01,
            },
            1,
        );
        let mut p = [1.0];
        opt.step(p.iter_mut(), [0.5].iter(), 0.1);
        // v = 0.5 + 0.01 = 0.51; p = 1 − 0.051
        assert!((p[0] - 0.949).abs() < 1e-15);
        opt.step(p.iter_mut(), [0.5].iter(), 0.1);
        let v2 = 0.9 * 0.51 + 0.5 + 0.01 * 0.949;
        assert!((p[0] - (0.949 - 0.1 * v2)).abs() < 1e-15);
    }
}
