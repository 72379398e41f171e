//! Central-difference verification of the hand-derived gradients.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{loss, loss_and_grads, ModelGrads, ModelParams, SeqPair, PARAM_NAMES};

/// Floor on the relative-error denominator so dead units do not divide 0/0.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Tensor name and flat index of the worst parameter.
    pub worst_param: (String, usize),
    /// Worst relative error per tensor, in bundle order.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn err_for(&self, name: &str) -> Option<f64> {
        self.per_param.iter().find(|(n, _)| n == name).map(|(_, e)| *e)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compare the analytic gradient of the token-mean loss over `pairs`
/// against `(L(p + eps) - L(p - eps)) / 2eps` for every parameter.
pub fn finite_diff_grad_check(
    model: &ModelParams,
    pairs: &[SeqPair<'_>],
    eps: f32,
) -> Result<GradCheckReport> {
    grad_check_with(model, pairs, eps, |_| {})
}

/// As [`finite_diff_grad_check`], with `tamper` applied to the analytic
/// gradient before comparison.
pub fn grad_check_with(
    model: &ModelParams,
    pairs: &[SeqPair<'_>],
    eps: f32,
    tamper: impl FnOnce(&mut ModelGrads),
) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(Error::Argument("eps must be positive".into()));
    }
    let (_, mut analytic) = loss_and_grads(model, pairs)?;
    tamper(&mut analytic);

    let mut probe = model.clone();
    let mut per_param = Vec::with_capacity(PARAM_NAMES.len());
    let mut worst = (PARAM_NAMES[0].to_string(), 0usize);
    let mut max_rel_err = 0.0f64;

    for (slot, name) in PARAM_NAMES.iter().enumerate() {
        let mut tensor_max = 0.0f64;
        let n = probe.tensors()[slot].len();
        for j in 0..n {
            let orig = probe.tensors()[slot].data()[j];
            let plus = orig + eps;
            let minus = orig - eps;

            probe.tensors_mut()[slot].data_mut()[j] = plus;
            let l_plus = loss(&probe, pairs)?;
            probe.tensors_mut()[slot].data_mut()[j] = minus;
            let l_minus = loss(&probe, pairs)?;
            probe.tensors_mut()[slot].data_mut()[j] = orig;

            if !l_plus.is_finite() || !l_minus.is_finite() {
                return Err(Error::numeric(
                    format!("{name}[{j}]"),
                    "loss became non-finite under perturbation",
                ));
            }
            // step actually taken after f32 rounding of p +/- eps
            let step = plus as f64 - minus as f64;
            let numeric = (l_plus - l_minus) / step;
            let rel = relative_error(analytic.slot(slot)[j], numeric);
            if rel > tensor_max {
                tensor_max = rel;
            }
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = (name.to_string(), j);
            }
        }
        per_param.push((name.to_string(), tensor_max));
    }

    Ok(GradCheckReport {
        max_rel_err,
        worst_param: worst,
        per_param,
    })
}
