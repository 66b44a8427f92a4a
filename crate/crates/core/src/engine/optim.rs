//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::engine::params::{Gradients, ParameterStore};
use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 3e-4,
        }
    }
}

/// Moment estimates for every parameter of a store.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParameterStore, config: AdamWConfig) -> Self {
        let zeros = |_: ()| -> Vec<Mat> {
            store
                .iter()
                .map(|(_, p)| Mat::zeros(p.value.rows(), p.value.cols()))
                .collect()
        };
        Self {
            config,
            m: zeros(()),
            v: zeros(()),
            step: 0,
        }
    }
}

/// One AdamW update of every trainable parameter:
///
/// ```text
/// m ← β1·m + (1−β1)·g
/// v ← β2·v + (1−β2)·g²
/// θ ← θ − lr·( m̂/(√v̂ + ε) + wd·θ )
/// ```
///
/// A non-finite gradient rejects the whole step and leaves `params` and
/// `state` untouched.
pub fn adamw_step(
    params: &mut ParameterStore,
    grads: &Gradients,
    state: &mut OptimizerState,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape("adamw_step", params.len(), grads.len()));
    }
    for (id, g) in grads.iter() {
        if let Some((r, c, v)) = g.first_non_finite() {
            return Err(Error::Optimizer(format!(
                "non-finite gradient {v} in {}[{r}, {c}]",
                params.get(id).name
            )));
        }
    }
    let cfg = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    let ids: Vec<_> = params.iter().map(|(id, p)| (id, p.trainable)).collect();
    for (id, trainable) in ids {
        if !trainable {
            continue;
        }
        let i = id.index();
        let g = grads.get(id).as_slice();
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        let theta = params.value_mut(id).as_mut_slice();
        for j in 0..theta.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            theta[j] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * theta[j]);
        }
    }
    Ok(())
}
