//! First-order optimizers over [`ModelParams`].

use serde::{Deserialize, Serialize};

use crate::encoder::{Gradients, ModelParams};
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    /// Plain gradient descent, `θ ← θ − η ∇L`.
    Sgd,
}

/// Adam moment estimates.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    m: ModelParams,
    v: ModelParams,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

fn check_shapes(params: &ModelParams, grads: &Gradients) -> Result<()> {
    let (p, g) = (params.tensors(), grads.tensors());
    if p.len() != g.len() {
        return Err(Error::size("gradient tensors", p.len(), g.len()));
    }
    for (a, b) in p.iter().zip(&g) {
        if a.1.len() != b.1.len() {
            return Err(Error::size("gradient tensor length", a.1.len(), b.1.len()));
        }
    }
    Ok(())
}

/// One Adam step with bias correction and decoupled weight decay.
///
/// Decay applies to projections and the classifier; attention parameters
/// (query, key and score vectors) are not decayed.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    check_shapes(params, grads)?;
    check_shapes(params, &state.m)?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let g_all = grads.tensors();
    let m_all = state.m.tensors_mut();
    let v_all = state.v.tensors_mut();
    for ((((kind, p), (_, g)), (_, m)), (_, v)) in params.tensors_mut().into_iter().zip(g_all).zip(m_all).zip(v_all) {
        let decay = if kind.is_attention() { 0.0 } else { weight_decay };
        for i in 0..p.len() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * (m_hat / (v_hat.sqrt() + EPSILON) + decay * p[i]);
        }
    }
    Ok(())
}

/// Plain gradient descent with the same decoupled decay rule.
pub fn sgd_step(params: &mut ModelParams, grads: &Gradients, lr: f64, weight_decay: f64) -> Result<()> {
    check_shapes(params, grads)?;
    for ((kind, p), (_, g)) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        let decay = if kind.is_attention() { 0.0 } else { weight_decay };
        for (pi, gi) in p.iter_mut().zip(g) {
            *pi -= lr * (gi + decay * *pi);
        }
    }
    Ok(())
}
