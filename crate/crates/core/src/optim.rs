//! Parameter update rules: plain SGD (default) and AdamW with a cosine schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sgd_step, Gradients, LoraAdapter, ParamId, Params, TinyLm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adamw,
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd { lr: f64 },
    AdamW(AdamW),
}

impl Optimizer {
    /// `total_steps` sets the cosine horizon for AdamW; SGD ignores it.
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, total_steps: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adamw => Optimizer::AdamW(AdamW::new(lr, weight_decay, total_steps)),
        }
    }

    pub fn step(&mut self, model: &mut TinyLm, adapter: Option<&mut LoraAdapter>, grads: &Gradients) -> Result<()> {
        match self {
            Optimizer::Sgd { lr } => sgd_step(model, adapter, grads, *lr),
            Optimizer::AdamW(adam) => adam.step(model, adapter, grads),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    total_steps: usize,
    t: usize,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, total_steps: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            total_steps: total_steps.max(1),
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Cosine-annealed learning rate for the current step.
    pub fn current_lr(&self) -> f64 {
        let progress = (self.t as f64 / self.total_steps as f64).min(1.0);
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    pub fn step(&mut self, model: &mut TinyLm, adapter: Option<&mut LoraAdapter>, grads: &Gradients) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient contains a non-finite entry".into()));
        }
        let lr = self.current_lr();
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let mut params = Params { model, adapter };
        for (id, g) in grads.iter() {
            let p = params
                .slice_mut(id)
                .ok_or_else(|| Error::InvalidArgument(format!("gradient for missing parameter {}", id.name())))?;
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p[i] -= lr * (update + self.weight_decay * p[i]);
            }
        }
        Ok(())
    }
}
