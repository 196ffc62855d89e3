//! AdamW with decoupled weight decay and element-wise gradient value clipping.

use super::params::{GradMap, ParamStore};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Each gradient element is clamped to [-clip, clip] before entering the
    /// moment estimates.
    pub grad_value_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_value_clip: 0.5,
        }
    }
}

/// First/second moment estimates plus the step counter.
#[derive(Clone, Default, Serialize, Deserialize)]
pub struct AdamWState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamWState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One optimizer step over every parameter that has a gradient entry.
    pub fn apply(&mut self, config: &AdamWConfig, params: &mut ParamStore, grads: &GradMap) {
        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - config.beta1.powf(t);
        let bias2 = 1.0 - config.beta2.powf(t);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let Some(grad) = grads.get(&name) else { continue };
            let value = params.get(&name).expect("iterated name exists").clone();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let mut data = value.to_vec();
            for i in 0..grad.len() {
                let g = grad[i].clamp(-config.grad_value_clip, config.grad_value_clip);
                m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
                v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                data[i] -= config.lr * (m_hat / (v_hat.sqrt() + config.eps)
                    + config.weight_decay * data[i]);
            }
            params.set(&name, value.with_data(data));
        }
    }
}
