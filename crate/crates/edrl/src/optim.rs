//! Adaptive moment estimation with global-norm gradient clipping.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::ModelParameters;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    cfg: AdamConfig,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: HashMap::new(),
            v: HashMap::new(),
            t: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// One update; iterates parameters in their fixed declaration order so
    /// updates are deterministic.
    pub fn step(
        &mut self,
        params: &mut ModelParameters,
        grads: &HashMap<String, Vec<f64>>,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for name in params.names() {
            let Some(g) = grads.get(&name) else { continue };
            let p = params.get_mut(&name)?;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data_mut()[i] -= self.cfg.lr * mh / (vh.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

/// Scale gradients so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut HashMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    // sum in sorted key order so the norm is bit-reproducible across runs
    let mut keys: Vec<&String> = grads.keys().collect();
    keys.sort();
    let norm: f64 = keys
        .iter()
        .flat_map(|k| grads[*k].iter().map(|v| v * v))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}
