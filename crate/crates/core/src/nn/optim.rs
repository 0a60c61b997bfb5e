use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Decoupled decay; ignored by plain Adam.
    #[serde(default)]
    pub weight_decay: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    /// Adam with beta = (0.5, 0.9), as used for the autoencoder.
    pub fn autoencoder(lr: f64) -> Self {
        Self { kind: OptimizerKind::Adam, lr, beta1: 0.5, beta2: 0.9, weight_decay: 0.0, eps: 1e-8 }
    }

    /// AdamW with beta = (0.9, 0.999), as used for the denoiser.
    pub fn diffusion(lr: f64) -> Self {
        Self { kind: OptimizerKind::AdamW, lr, beta1: 0.9, beta2: 0.999, weight_decay: 0.01, eps: 1e-8 }
    }

    pub fn validate(&self) -> Result<()> {
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr > 0.0) || !beta_ok(self.beta1) || !beta_ok(self.beta2) || self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// First/second moment estimates for the parameters it owns.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    ids: Vec<ParamId>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Result<Self> {
        Self::for_params(config, store, store.ids().collect())
    }

    /// Updates only `ids`; other parameters are left untouched by [`Optimizer::step`].
    pub fn for_params(config: OptimizerConfig, store: &ParamStore, ids: Vec<ParamId>) -> Result<Self> {
        config.validate()?;
        let zeros = || ids.iter().map(|&id| Tensor::zeros(store.get(id).rows(), store.get(id).cols())).collect::<Vec<_>>();
        Ok(Self { config, m: zeros(), v: zeros(), ids, step: 0 })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. A non-finite gradient aborts before any
    /// parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) -> Result<()> {
        for &id in &self.ids {
            if !grads.get(id).is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for parameter {}", store.name(id))));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let decay = match c.kind {
            OptimizerKind::AdamW => 1.0 - c.lr * c.weight_decay,
            OptimizerKind::Adam => 1.0,
        };
        for ((&id, m), v) in self.ids.iter().zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            let g = grads.get(id);
            let p = store.get_mut(id).data_mut();
            for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p = *p * decay - c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
