//! Gradient-descent optimizers with linear warmup, cosine decay and
//! global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Momentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Momentum,
            lr: 0.05,
            min_lr_ratio: 0.05,
            warmup_steps: 0,
            clip_norm: 5.0,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn momentum(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Momentum,
            lr,
            ..Self::default()
        }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::Config("min_lr_ratio must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("momentum and betas must lie in [0, 1)".into()));
        }
        if self.clip_norm < 0.0 {
            return Err(Error::Config("clip_norm must be non-negative".into()));
        }
        Ok(())
    }

    /// Learning rate at `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let floor = self.lr * self.min_lr_ratio;
        floor + 0.5 * (self.lr - floor) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    updates: u64,
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig, store: &ParamStore) -> Self {
        let zeros = || store.ids().map(|id| {
            let t = store.get(id);
            Tensor::zeros(t.rows(), t.cols())
        }).collect::<Vec<_>>();
        Optimizer {
            cfg: *cfg,
            first: zeros(),
            second: match cfg.kind {
                OptimizerKind::Adam => zeros(),
                OptimizerKind::Momentum => Vec::new(),
            },
            updates: 0,
        }
    }

    /// Applies one update; returns the pre-clipping gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut Grads, step: usize, total: usize) -> f64 {
        let norm = grads.global_norm();
        if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            grads.scale(self.cfg.clip_norm / norm);
        }
        let lr = self.cfg.lr_at(step, total);
        self.updates += 1;
        let c = &self.cfg;
        let (bc1, bc2) = (1.0 - c.beta1.powi(self.updates as i32), 1.0 - c.beta2.powi(self.updates as i32));
        for (id, g) in grads.iter() {
            let i = id.index();
            let p = store.get_mut(id).data_mut();
            let m = self.first[i].data_mut();
            match c.kind {
                OptimizerKind::Momentum => {
                    for ((p, m), g) in p.iter_mut().zip(m.iter_mut()).zip(g.data()) {
                        *m = c.momentum * *m + g;
                        *p -= lr * *m;
                    }
                }
                OptimizerKind::Adam => {
                    let v = self.second[i].data_mut();
                    for (((p, m), v), g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                    }
                }
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    #[test]
    fn schedule_warms_up_then_decays_to_floor() {
        let cfg = OptimizerConfig {
            warmup_steps: 10,
            ..OptimizerConfig::momentum(1.0)
        };
        assert!((cfg.lr_at(0, 100) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at(10, 100) - 1.0).abs() < 1e-12);
        assert!((cfg.lr_at(100, 100) - 0.05).abs() < 1e-12);
        assert!(cfg.lr_at(50, 100) < cfg.lr_at(20, 100));
    }

    fn minimize(cfg: OptimizerConfig) -> f64 {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::row_vector(vec![3.0, -2.0]));
        let mut opt = Optimizer::new(&cfg, &store);
        for step in 0..300 {
            let mut grads = Grads::new(&store);
            let mut g = Graph::new(&store);
            let p = g.param(x);
            let sq = g.mul(p, p);
            let l = g.sum_all(sq);
            g.backward(l, &mut grads);
            opt.step(&mut store, &mut grads, step, 300);
        }
        store.get(x).sum_sq()
    }

    #[test]
    fn both_optimizers_minimize_a_quadratic() {
        assert!(minimize(OptimizerConfig::momentum(0.05)) < 1e-6);
        assert!(minimize(OptimizerConfig::adam(0.1)) < 1e-3);
    }
}
