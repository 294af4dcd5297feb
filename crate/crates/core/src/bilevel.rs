//! Bi-level update of the similarity network: the discovery loss drives a
//! plain-descent image of the classifier parameters, and the labeled
//! cross-entropy at that image is differentiated through the update to get
//! the similarity-network gradient.
//!
//! Two interchangeable hypergradient modes: exact unrolling (backward
//! through the backward pass, the reference) and a central-difference
//! Hessian-vector product (two extra gradient evaluations, the default).

use serde::{Deserialize, Serialize};

use crate::optim::{optimizer_step, OptimError, OptimizerState};
use crate::params::{grad, LossFn, ParamVector};
use crate::tape::{DiffError, Tape};

pub const INNER_PREFIXES: [&str; 2] = ["theta.", "phi."];
pub const OUTER_PREFIX: &str = "omega.";

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum HypergradMode {
    ExactUnrolled,
    HvpCentralDifference,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BilevelConfig {
    /// Step size of the inner plain-descent image (and of the classifier
    /// optimizer).
    pub alpha_theta_phi: f64,
    /// Similarity-network step size.
    pub alpha_omega: f64,
    pub hypergrad_mode: HypergradMode,
    /// The finite-difference probe step is eps_scale / ||v||.
    pub eps_scale: f64,
}

impl Default for BilevelConfig {
    fn default() -> Self {
        BilevelConfig {
            alpha_theta_phi: 5e-4,
            alpha_omega: 1e-4,
            hypergrad_mode: HypergradMode::HvpCentralDifference,
            eps_scale: 1e-2,
        }
    }
}

#[derive(Debug, Error)]
pub enum BilevelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}
use thiserror::Error;

/// One plain-descent step of the classifier parameters on the inner loss,
/// leaving the similarity network untouched. Returns the loss value and the
/// updated vector.
pub fn inner_update(
    f_nov: &dyn LossFn,
    params: &ParamVector,
    alpha: f64,
) -> Result<(f64, ParamVector), DiffError> {
    let (value, g) = grad(f_nov, params)?;
    let inner_idx = params.indices_with_prefix(&INNER_PREFIXES);
    let mut out = params.clone();
    for &i in &inner_idx {
        out.values_mut()[i] -= alpha * g[i];
    }
    Ok((value, out))
}

#[derive(Debug, Clone)]
pub struct Hypergrad {
    /// Flat gradient aligned with the parameter layout; nonzero only on
    /// similarity-network coordinates.
    pub flat: Vec<f64>,
    /// Norm of the outer-loss gradient at the inner image (central-difference
    /// mode only).
    pub v_norm: Option<f64>,
    /// The outer gradient vanished, so the hypergradient is exactly zero.
    pub zero_v: bool,
}

/// Gradient of the outer loss at the inner plain-descent image with respect
/// to the similarity-network parameters, differentiated through the inner
/// update.
pub fn hypergrad(
    f_nov: &dyn LossFn,
    f_outer: &dyn LossFn,
    params: &ParamVector,
    cfg: &BilevelConfig,
) -> Result<Hypergrad, DiffError> {
    match cfg.hypergrad_mode {
        HypergradMode::ExactUnrolled => hypergrad_unrolled(f_nov, f_outer, params, cfg),
        HypergradMode::HvpCentralDifference => hypergrad_hvp(f_nov, f_outer, params, cfg),
    }
}

fn hypergrad_unrolled(
    f_nov: &dyn LossFn,
    f_outer: &dyn LossFn,
    params: &ParamVector,
    cfg: &BilevelConfig,
) -> Result<Hypergrad, DiffError> {
    let mut tape = Tape::new();
    let nodes = crate::params::ParamNodes::from_params(&mut tape, params);
    let out_nov = f_nov.build(&mut tape, &nodes);

    let inner: Vec<(String, crate::tape::NodeId)> = nodes
        .iter()
        .filter(|(n, _)| INNER_PREFIXES.iter().any(|p| n.starts_with(p)))
        .map(|(n, id)| (n.to_string(), id))
        .collect();
    let inner_ids: Vec<_> = inner.iter().map(|(_, id)| *id).collect();
    // backward emits the gradient as new tape nodes, so the unrolled image
    // below stays differentiable
    let gs = tape.backward(out_nov, &inner_ids)?;

    let mut unrolled = nodes.clone();
    for ((name, id), g) in inner.iter().zip(&gs) {
        let step = tape.mul_scalar(*g, cfg.alpha_theta_phi);
        let upd = tape.sub(*id, step);
        unrolled = unrolled.with_replacement(name, upd);
    }

    let out_ce = f_outer.build(&mut tape, &unrolled);
    let omega: Vec<(String, crate::tape::NodeId)> = nodes
        .iter()
        .filter(|(n, _)| n.starts_with(OUTER_PREFIX))
        .map(|(n, id)| (n.to_string(), id))
        .collect();
    let omega_ids: Vec<_> = omega.iter().map(|(_, id)| *id).collect();
    let hs = tape.backward(out_ce, &omega_ids)?;

    let mut flat = vec![0.0; params.len()];
    for ((name, _), h) in omega.iter().zip(&hs) {
        let seg = params.segment(name);
        let hv = tape.value(*h);
        for (dst, src) in flat[seg.range()].iter_mut().zip(hv.iter()) {
            *dst = *src;
        }
    }
    Ok(Hypergrad { flat, v_norm: None, zero_v: false })
}

fn hypergrad_hvp(
    f_nov: &dyn LossFn,
    f_outer: &dyn LossFn,
    params: &ParamVector,
    cfg: &BilevelConfig,
) -> Result<Hypergrad, DiffError> {
    let alpha = cfg.alpha_theta_phi;
    let (_, inner) = inner_update(f_nov, params, alpha)?;
    let (_, g_outer) = grad(f_outer, &inner)?;
    let inner_idx = params.indices_with_prefix(&INNER_PREFIXES);
    let v: Vec<f64> = inner_idx.iter().map(|&i| g_outer[i]).collect();
    let v_norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if v_norm == 0.0 {
        // a flat outer loss yields an exactly zero hypergradient; this is
        // legitimate (e.g. the first batches of training), not an error
        return Ok(Hypergrad {
            flat: vec![0.0; params.len()],
            v_norm: Some(0.0),
            zero_v: true,
        });
    }
    let eps = cfg.eps_scale / v_norm;
    let mut plus = params.clone();
    plus.axpy_at(&inner_idx, &v, eps);
    let mut minus = params.clone();
    minus.axpy_at(&inner_idx, &v, -eps);
    let (_, gp) = grad(f_nov, &plus)?;
    let (_, gm) = grad(f_nov, &minus)?;
    let omega_idx = params.indices_with_prefix(&[OUTER_PREFIX]);
    let mut flat = vec![0.0; params.len()];
    for &i in &omega_idx {
        flat[i] = -alpha * (gp[i] - gm[i]) / (2.0 * eps);
    }
    Ok(Hypergrad { flat, v_norm: Some(v_norm), zero_v: false })
}

#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub l_nov: f64,
    pub hyper_zero_v: bool,
}

/// One full discovery-stage parameter update on a batch: the classifier
/// takes an optimizer step on the inner loss (similarity-network
/// coordinates masked out), and the similarity network takes a plain
/// descent step along the hypergradient of the outer loss. Both gradients
/// are taken at the incoming parameters.
///
/// `f_nov` drives the classifier update; `f_nov_hyper` is the inner loss
/// the hypergradient differentiates through. They coincide unless the
/// classifier objective detaches a branch (e.g. the similarity-score
/// target), which would otherwise sever the only path into the
/// similarity-network parameters.
pub fn stage1_step(
    f_nov: &dyn LossFn,
    f_nov_hyper: &dyn LossFn,
    f_outer: &dyn LossFn,
    params: &mut ParamVector,
    opt: &mut OptimizerState,
    cfg: &BilevelConfig,
) -> Result<StepReport, BilevelError> {
    let hyper = hypergrad(f_nov_hyper, f_outer, params, cfg)?;
    let (l_nov, mut g) = grad(f_nov, params)?;
    let omega_idx = params.indices_with_prefix(&[OUTER_PREFIX]);
    for &i in &omega_idx {
        g[i] = 0.0;
    }
    optimizer_step(opt, params, &g)?;
    for &i in &omega_idx {
        params.values_mut()[i] -= cfg.alpha_omega * hyper.flat[i];
    }
    Ok(StepReport { l_nov, hyper_zero_v: hyper.zero_v })
}
