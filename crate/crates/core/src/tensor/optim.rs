use std::f64::consts::PI;

use super::{ParamGrads, ParamStore, Tensor};
use crate::error::{invalid, shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
    /// Horizon of the cosine schedule; 0 keeps the rate constant.
    pub total_steps: u64,
}

impl AdamConfig {
    pub fn new(base_lr: f64, total_steps: u64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            base_lr,
            total_steps,
        }
    }
}

/// Cosine annealing: `base * 0.5 * (1 + cos(pi * t / T))`, clamped at `t = T`.
pub fn cosine_lr(base_lr: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (PI * t).cos())
}

/// Adam moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Result<Self> {
        if !(config.base_lr >= 0.0) {
            return invalid(format!("learning rate must be >= 0, got {}", config.base_lr));
        }
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Ok(Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.config.base_lr, self.step, self.config.total_steps)
    }
}

/// One Adam update with bias correction at the cosine-scheduled rate for
/// the current step. Frozen parameters and their moments are left as is.
pub fn adam_step(params: &mut ParamStore, grads: &ParamGrads, state: &mut OptimizerState) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return shape_err(
            "adam_step",
            format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        );
    }
    for id in 0..params.len() {
        let shape = params.tensor(id).shape();
        if grads.by_id(id).shape() != shape || state.m[id].shape() != shape {
            return shape_err(
                "adam_step",
                format!(
                    "`{}`: param {:?}, grad {:?}, moment {:?}",
                    params.name(id),
                    shape,
                    grads.by_id(id).shape(),
                    state.m[id].shape()
                ),
            );
        }
    }

    let AdamConfig {
        beta1, beta2, eps, ..
    } = state.config;
    let lr = state.current_lr();
    let t = (state.step + 1) as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for id in 0..params.len() {
        if params.is_frozen(id) {
            continue;
        }
        let g = grads.by_id(id).data();
        let m = state.m[id].data_mut();
        let v = state.v[id].data_mut();
        let w = params.tensor_mut(id).data_mut();
        for i in 0..w.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.step += 1;
    Ok(())
}
