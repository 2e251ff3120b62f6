use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::graph::Mat;
use super::params::{Gradients, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Final learning rate as a fraction of the initial one.
    pub final_lr_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            final_lr_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            epochs: 30,
            batch_size: 16,
            clip_norm: 5.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err("final_lr_fraction must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err("beta1/beta2 must lie in [0, 1)".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err("epochs and batch_size must be at least 1".into());
        }
        if self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return Err("weight_decay and clip_norm must be non-negative".into());
        }
        Ok(())
    }

    /// Cosine annealing from `learning_rate` at epoch 0 down to
    /// `final_lr_fraction * learning_rate` at the last epoch.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let lr_min = self.learning_rate * self.final_lr_fraction;
        if self.epochs <= 1 {
            return self.learning_rate;
        }
        let progress = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
        lr_min + 0.5 * (self.learning_rate - lr_min) * (1.0 + (PI * progress).cos())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: OptimizerConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, params: &ParamSet) -> Self {
        let m: Vec<Mat> = params.iter().map(|(_, p)| Mat::zeros(p.dim())).collect();
        let v = m.clone();
        Self { cfg, m, v, step: 0 }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients, lr: f64) {
        self.step += 1;
        let clip = if self.cfg.clip_norm > 0.0 {
            let n = grads.global_norm();
            if n > self.cfg.clip_norm {
                self.cfg.clip_norm / n
            } else {
                1.0
            }
        } else {
            1.0
        };
        let (b1, b2, eps, wd) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.cfg.weight_decay);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = &grads.values()[k];
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            let p = params.get_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = g * clip;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_ends_at_tenth() {
        let cfg = OptimizerConfig {
            learning_rate: 1e-4,
            epochs: 350,
            ..Default::default()
        };
        assert!((cfg.lr_at_epoch(0) - 1e-4).abs() < 1e-18);
        assert!((cfg.lr_at_epoch(349) - 1e-5).abs() < 1e-9);
        let mid = cfg.lr_at_epoch(174);
        assert!(mid < 1e-4 && mid > 1e-5);
    }

    #[test]
    fn schedule_is_monotone() {
        let cfg = OptimizerConfig::default();
        let lrs: Vec<_> = (0..cfg.epochs).map(|e| cfg.lr_at_epoch(e)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Mat::from_elem((1, 2), 3.0));
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            clip_norm: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &ps);
        for _ in 0..300 {
            let mut g = Gradients::zeros_like(&ps);
            let x = ps.get(id).clone();
            g.accumulate(0, &(x * 2.0));
            opt.step(&mut ps, &g, 0.1);
        }
        assert!(ps.get(id).iter().all(|v| v.abs() < 0.05));
    }
}
