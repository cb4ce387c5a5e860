//! AdamW with decoupled weight decay, linear warmup and cosine decay.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_ratio: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.01, warmup_steps: 20, min_lr_ratio: 0.1, grad_clip: 1.0 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid!("adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(invalid!("eps must be positive; weight decay and clip nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(invalid!("min_lr_ratio must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Learning rate for 0-based `step` out of `total` steps.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps.min(step)) as f64 / span as f64).min(1.0);
        let floor = self.lr * self.min_lr_ratio;
        floor + 0.5 * (self.lr - floor) * (1.0 + libm::cos(core::f64::consts::PI * t))
    }
}

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: OptimConfig,
    pub step: u64,
    pub moments: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(config: OptimConfig, store: &ParamStore) -> Self {
        Self { config, step: 0, moments: (0..store.len()).map(|_| None).collect() }
    }

    /// One update of every trainable parameter that has a gradient.
    /// Frozen parameters are never written.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - libm::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.step as f64);
        for (id, g) in grads.present() {
            if !store.is_trainable(id) {
                continue;
            }
            let decay = store.param(id).decay;
            let mo = self.moments[id.index()].get_or_insert_with(|| Moments {
                m: Tensor::zeros(g.rows(), g.cols()),
                v: Tensor::zeros(g.rows(), g.cols()),
            });
            let w = store.value_mut(id).data_mut();
            let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                if decay {
                    w[i] -= lr * c.weight_decay * w[i];
                }
                w[i] -= lr * mhat / (libm::sqrt(vhat) + c.eps);
            }
        }
    }

    /// Clips, then updates with the scheduled rate for `self.step`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut Gradients, total_steps: u64) -> f64 {
        if self.config.grad_clip > 0.0 {
            let norm = grads.global_norm();
            if norm > self.config.grad_clip {
                grads.scale(self.config.grad_clip / norm);
            }
        }
        let lr = self.config.lr_at(self.step, total_steps);
        self.update(store, grads, lr);
        lr
    }
}

/// Mean loss and summed `1/B`-scaled gradients over a batch, one graph per
/// item.
pub fn batch_gradients<T>(
    store: &ParamStore,
    items: &[T],
    mut loss: impl FnMut(&mut Graph<'_>, &T) -> Result<Var>,
) -> Result<(Gradients, f64)> {
    if items.is_empty() {
        return Err(crate::Error::Empty("batch"));
    }
    let mut grads = Gradients::for_store(store);
    let scale = 1.0 / items.len() as f64;
    let mut total = 0.0;
    for it in items {
        let mut g = Graph::new(store);
        let l = loss(&mut g, it)?;
        total += g.value(l).item();
        g.backward_into(l, scale, &mut grads);
    }
    Ok((grads, total * scale))
}
