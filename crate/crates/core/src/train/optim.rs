use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// First and second moment buffers of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// AdamW state: moments are created on a parameter's first update.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub hyper: AdamWParams,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl OptimState {
    pub fn new(hyper: AdamWParams) -> Self {
        Self {
            hyper,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

/// One AdamW update of every trainable parameter. A trainable parameter
/// without an entry in `grads` is treated as having a zero gradient, so
/// weight decay still applies; frozen parameters are never touched.
pub fn optimizer_step(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut OptimState,
) -> Result<()> {
    for (name, g) in grads {
        match store.get(name) {
            Some(p) if p.data.len() != g.len() => {
                return Err(Error::Internal(format!(
                    "gradient for {name} has {} elements, parameter has {}",
                    g.len(),
                    p.data.len()
                )))
            }
            None => return Err(Error::Internal(format!("gradient for unknown parameter {name}"))),
            _ => {}
        }
    }
    state.step += 1;
    let AdamWParams {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.hyper;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
    for (name, p) in store.params_mut() {
        if !p.trainable {
            continue;
        }
        let n = p.data.len();
        let mom = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        if mom.m.len() != n || mom.v.len() != n {
            return Err(Error::Internal(format!(
                "optimizer moments for {name} do not match its shape"
            )));
        }
        let g = grads.get(name);
        for i in 0..n {
            let gi = g.map_or(0.0, |g| g[i] as f64);
            let m = beta1 * mom.m[i] as f64 + (1.0 - beta1) * gi;
            let v = beta2 * mom.v[i] as f64 + (1.0 - beta2) * gi * gi;
            mom.m[i] = m as f32;
            mom.v[i] = v as f32;
            let theta = p.data[i] as f64;
            let update = (m / c1) / ((v / c2).sqrt() + eps) + weight_decay * theta;
            p.data[i] = (theta - lr * update) as f32;
        }
    }
    Ok(())
}
