//! First-order optimizers: SGD with heavy-ball momentum and Adam.

use mcinet_autodiff::Tensor;

use crate::config::{OptimConfig, OptimMethod};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// SGD: `v ← μ·v + g`, `p ← p − lr·v`.
/// Adam: bias-corrected moments `m`, `s` with `p ← p − lr·m̂/(√ŝ + ε)`.
/// Frozen parameters are left untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub cfg: OptimConfig,
    /// Momentum buffer (SGD) or first moment (Adam).
    pub velocity: Vec<Tensor>,
    /// Second moment (Adam); all zeros for SGD.
    pub second: Vec<Tensor>,
    /// Number of updates applied.
    pub updates: u64,
}

const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(cfg: &OptimConfig, store: &ParamStore) -> Self {
        let zeros = || -> Vec<Tensor> {
            store
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.shape().to_vec()))
                .collect()
        };
        Self {
            cfg: cfg.clone(),
            velocity: zeros(),
            second: zeros(),
            updates: 0,
        }
    }

    /// Global L2 norm over the trainable gradients.
    pub fn grad_norm(store: &ParamStore, grads: &[Tensor]) -> f64 {
        store
            .entries()
            .iter()
            .zip(grads)
            .filter(|(e, _)| !e.frozen)
            .flat_map(|(_, g)| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() || self.velocity.len() != store.len() || self.second.len() != store.len() {
            return Err(Error::validation(format!(
                "{} gradients and {} velocity buffers for {} parameters",
                grads.len(),
                self.velocity.len(),
                store.len()
            )));
        }
        let scale = match self.cfg.clip_norm {
            Some(max) => {
                let norm = Self::grad_norm(store, grads);
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.updates += 1;
        let (lr, mu, b2) = (self.cfg.lr, self.cfg.momentum, self.cfg.beta2);
        let t = self.updates as i32;
        let (c1, c2) = (1.0 - mu.powi(t), 1.0 - b2.powi(t));
        let ids: Vec<_> = store.ids().collect();
        for (((id, g), v), s) in ids.into_iter().zip(grads).zip(&mut self.velocity).zip(&mut self.second) {
            if store.entry(id).frozen {
                continue;
            }
            let p = store.get_mut(id).data_mut();
            match self.cfg.method {
                OptimMethod::Sgd => {
                    for ((pv, &gv), vv) in p.iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *vv = mu * *vv + scale * gv;
                        *pv -= lr * *vv;
                    }
                }
                OptimMethod::Adam => {
                    for (((pv, &gv), vv), sv) in p.iter_mut().zip(g.data()).zip(v.data_mut()).zip(s.data_mut()) {
                        let gv = scale * gv;
                        *vv = mu * *vv + (1.0 - mu) * gv;
                        *sv = b2 * *sv + (1.0 - b2) * gv * gv;
                        *pv -= lr * (*vv / c1) / ((*sv / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    #[test]
    fn momentum_update_matches_closed_form() {
        let mut store = ParamStore::new();
        store.add("w", ParamGroup::Backbone, Tensor::new(vec![1], vec![1.0]).unwrap());
        let cfg = OptimConfig {
            lr: 0.1,
            momentum: 0.9,
            ..OptimConfig::default()
        };
        let mut opt = Optimizer::new(&cfg, &store);
        let g = vec![Tensor::new(vec![1], vec![1.0]).unwrap()];
        opt.step(&mut store, &g).unwrap();
        opt.step(&mut store, &g).unwrap();
        // v1 = 1, v2 = 1.9 → p = 1 − 0.1·(1 + 1.9)
        assert!((store.entries()[0].value.data()[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        store.add("w", ParamGroup::Backbone, Tensor::full(vec![2], 1.0));
        store.freeze_group(ParamGroup::Backbone);
        let mut opt = Optimizer::new(&OptimConfig::default(), &store);
        opt.step(&mut store, &[Tensor::full(vec![2], 5.0)]).unwrap();
        assert_eq!(store.entries()[0].value.data(), &[1.0, 1.0]);
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new();
        store.add("w", ParamGroup::Backbone, Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let cfg = OptimConfig {
            method: OptimMethod::Adam,
            lr: 0.01,
            ..OptimConfig::default()
        };
        let mut opt = Optimizer::new(&cfg, &store);
        opt.step(&mut store, &[Tensor::new(vec![2], vec![3.0, -0.5]).unwrap()]).unwrap();
        let p = store.entries()[0].value.data();
        assert!((p[0] - 0.99).abs() < 1e-8);
        assert!((p[1] - 1.01).abs() < 1e-8);
    }
}
