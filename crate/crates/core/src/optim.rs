use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Decoupled-weight-decay Adam settings with linear warmup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            warmup_steps: 2000,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    /// Step size at (zero-based) step `s`: `lr·s/warmup` during warmup,
    /// `lr` afterwards.
    pub fn lr_at(&self, s: u64) -> f64 {
        if s < self.warmup_steps {
            self.lr * s as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }
}

/// AdamW over the trainable tensors of one or more stores.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: OptimConfig,
    step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(config: OptimConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Current step size, before the update that [`AdamW::update`] applies next.
    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.step)
    }

    /// Apply one update to `store` using `grads`. `prefix` namespaces the
    /// moment buffers so several stores can share an optimizer. Frozen
    /// tensors are never touched, even if a gradient is supplied.
    pub fn update(
        &mut self,
        prefix: &str,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        let lr = self.config.lr_at(self.step) as f32;
        let t = (self.step + 1) as i32;
        let (b1, b2) = (self.config.beta1 as f32, self.config.beta2 as f32);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let eps = self.config.eps as f32;
        let wd = self.config.weight_decay as f32;
        let names: Vec<String> = store.trainable_names().cloned().collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let p = store.get_mut(&name).expect("trainable name exists");
            if g.numel() != p.numel() {
                return Err(Error::invalid(format!("gradient shape mismatch for `{}`", name)));
            }
            let key = format!("{}{}", prefix, name);
            let m = self.m.entry(key.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.v.entry(key).or_insert_with(|| vec![0.0; g.numel()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
            }
        }
        Ok(())
    }

    /// Advance the step counter; call once after all stores are updated.
    pub fn finish_step(&mut self) {
        self.step += 1;
    }
}
