use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::autodiff::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
        }
    }
}

fn check(theta: &ParamVector, grad: &ParamVector) -> Result<(), TrainError> {
    if theta.dim() != grad.dim() {
        return Err(TrainError::Config(format!(
            "gradient has {} entries, parameters {}",
            grad.dim(),
            theta.dim()
        )));
    }
    if !grad.is_finite() {
        return Err(TrainError::NonFinite {
            what: "gradient",
            context: "outer update".into(),
        });
    }
    Ok(())
}

/// One bias-corrected Adam step, in place. Weight decay is applied as
/// `θ ← θ − lr·wd·θ`, separate from the moment estimates.
pub fn adam_update(
    theta: &mut ParamVector,
    grad: &ParamVector,
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    check(theta, grad)?;
    if state.m.len() != theta.dim() || state.v.len() != theta.dim() {
        return Err(TrainError::Config("optimizer state does not match parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let g = grad.values();
    for (i, p) in theta.values_mut().iter_mut().enumerate() {
        let m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g[i];
        let v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        state.m[i] = m;
        state.v[i] = v;
        let m_hat = m / c1;
        let v_hat = v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps) + lr * weight_decay * *p;
    }
    Ok(())
}

/// `θ ← θ − lr·(g + wd·θ)`.
pub fn sgd_update(theta: &mut ParamVector, grad: &ParamVector, lr: f64, weight_decay: f64) -> Result<(), TrainError> {
    check(theta, grad)?;
    let g = grad.values();
    for (i, p) in theta.values_mut().iter_mut().enumerate() {
        *p -= lr * (g[i] + weight_decay * *p);
    }
    Ok(())
}
