//! Finite-difference verification of analytic gradients.

use super::{zero_grads, ParamHost};

#[derive(Debug, Clone)]
pub struct GradCheckResult {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub scalars_checked: usize,
}

/// Compare a model's analytic gradients against central differences.
///
/// `loss` must be a deterministic pure function of the parameters: same
/// batch every call, dropout off, batchnorm statistics handled so repeated
/// evaluations see identical state. Called with `true` it must also run
/// the backward pass, leaving gradients in the layers; with `false` it
/// evaluates the loss only.
///
/// Returns the maximum over all gradient-bearing scalars (frozen layers
/// included, their backward math is equally subject to verification) of
/// |analytic − numeric| / max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<M: ParamHost<f64>>(
    model: &mut M,
    mut loss: impl FnMut(&mut M, bool) -> f64,
    eps: f64,
) -> GradCheckResult {
    zero_grads(model);
    let _ = loss(model, true);

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |p| {
        if let Some(g) = p.grad {
            analytic.push((p.name, g.to_vec()));
        }
    });

    let mut result = GradCheckResult {
        max_rel_err: 0.0,
        worst_param: String::new(),
        scalars_checked: 0,
    };

    for (target, (name, grads)) in analytic.iter().enumerate() {
        for elem in 0..grads.len() {
            let orig = set_param(model, target, elem, None);
            set_param(model, target, elem, Some(orig + eps));
            let lp = loss(model, false);
            set_param(model, target, elem, Some(orig - eps));
            let lm = loss(model, false);
            set_param(model, target, elem, Some(orig));

            let numeric = (lp - lm) / (2.0 * eps);
            let a = grads[elem];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            result.scalars_checked += 1;
            if rel > result.max_rel_err {
                result.max_rel_err = rel;
                result.worst_param = format!("{name}[{elem}]");
            }
        }
    }
    result
}

/// Read (and optionally write) one scalar of the target-th gradient-bearing
/// parameter, addressing by walk order.
fn set_param<M: ParamHost<f64>>(
    model: &mut M,
    target: usize,
    elem: usize,
    new_value: Option<f64>,
) -> f64 {
    let mut index = 0usize;
    let mut out = f64::NAN;
    model.visit_params(&mut |p| {
        if p.grad.is_some() {
            if index == target {
                out = p.value[elem];
                if let Some(v) = new_value {
                    p.value[elem] = v;
                }
            }
            index += 1;
        }
    });
    debug_assert!(out.is_finite() || new_value.is_none());
    out
}
