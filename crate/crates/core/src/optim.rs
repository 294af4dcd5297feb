//! Plain descent and Adam over the flat parameter vector.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamVector;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("gradient length {got} does not match parameter length {expected}")]
    ShapeMismatch { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    PlainDescent,
    AdaptiveMoment,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn plain_descent(lr: f64, dim: usize) -> Self {
        OptimizerState {
            kind: OptimizerKind::PlainDescent,
            step: 0,
            lr,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }

    pub fn adam(lr: f64, dim: usize) -> Self {
        OptimizerState {
            kind: OptimizerKind::AdaptiveMoment,
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }
}

/// One optimizer step in place. Plain descent: p -= lr * g. Adam: the
/// standard bias-corrected moment update.
pub fn optimizer_step(
    state: &mut OptimizerState,
    params: &mut ParamVector,
    grads: &[f64],
) -> Result<(), OptimError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(OptimError::ShapeMismatch {
            got: grads.len(),
            expected: params.len(),
        });
    }
    state.step += 1;
    match state.kind {
        OptimizerKind::PlainDescent => {
            for (p, &g) in params.values_mut().iter_mut().zip(grads) {
                *p -= state.lr * g;
            }
        }
        OptimizerKind::AdaptiveMoment => {
            let t = state.step as i32;
            let bc1 = 1.0 - state.beta1.powi(t);
            let bc2 = 1.0 - state.beta2.powi(t);
            for i in 0..grads.len() {
                let g = grads[i];
                state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
                state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
                let mhat = state.m[i] / bc1;
                let vhat = state.v[i] / bc2;
                params.values_mut()[i] -= state.lr * mhat / (vhat.sqrt() + state.eps);
            }
        }
    }
    Ok(())
}
