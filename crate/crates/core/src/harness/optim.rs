use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update from the gradients accumulated on `params`.
    /// Tensors without a gradient are left untouched.
    pub fn update(&mut self, params: &mut ParamStore, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, t) in params.iter_mut() {
            let Some(grad) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; grad.len()]);
            for (((x, g), m), v) in t.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *x -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
    }

    /// Moments as a parameter store (`m/<name>`, `v/<name>`) for checkpointing.
    pub fn moments(&self, params: &ParamStore) -> ParamStore {
        let mut out = ParamStore::new();
        for (prefix, map) in [("m/", &self.m), ("v/", &self.v)] {
            for (name, data) in map {
                let shape = params.get(name).map(|t| t.shape().to_vec()).unwrap_or_else(|| vec![data.len()]);
                out.insert(&format!("{prefix}{name}"), Tensor::new(shape, data.clone()).expect("moment shape"));
            }
        }
        out
    }

    pub fn restore_moments(&mut self, store: &ParamStore) -> Result<()> {
        for (key, t) in store.iter() {
            let (map, name) = if let Some(n) = key.strip_prefix("m/") {
                (&mut self.m, n)
            } else if let Some(n) = key.strip_prefix("v/") {
                (&mut self.v, n)
            } else {
                return Err(Error::Format {
                    what: "optimizer state",
                    reason: format!("unexpected entry `{key}`"),
                });
            };
            map.insert(name.to_string(), t.data().to_vec());
        }
        Ok(())
    }
}

/// Rescales every gradient so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, t) in params.iter_mut() {
            if let Some(g) = t.grad() {
                let delta: Vec<f64> = g.iter().map(|x| x * (scale - 1.0)).collect();
                t.accumulate_grad(&delta);
            }
        }
    }
    norm
}
