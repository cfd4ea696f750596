//! Central finite-difference gradient checking.

use crate::error::{GastonError, Result};
use crate::numerics::tensor::Tensor2;

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor and flat entry index where the worst error occurred.
    pub worst: (usize, usize),
    pub entries_checked: usize,
}

/// `|a - n| / max(1, |a|, |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares analytic gradients against `(f(θ+h) - f(θ-h)) / 2h` for every
/// entry of every tensor in `params`.
///
/// `f` returns the loss and, when `want_grad` is set, the gradient of each
/// parameter tensor in the same order.
pub fn grad_check<F>(params: &[Tensor2], h: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor2], bool) -> Result<(f64, Option<Vec<Tensor2>>)>,
{
    let (base, grads) = f(params, true)?;
    if !base.is_finite() {
        return Err(GastonError::Numeric(format!("loss is {base} at the check point")));
    }
    let grads = grads.ok_or_else(|| GastonError::arg("function returned no gradients"))?;
    if grads.len() != params.len() {
        return Err(GastonError::arg("gradient count does not match parameter count"));
    }

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        entries_checked: 0,
    };
    for t in 0..params.len() {
        if grads[t].shape() != params[t].shape() {
            return Err(GastonError::arg(format!("gradient {t} has the wrong shape")));
        }
        for j in 0..params[t].data().len() {
            let orig = params[t].data()[j];
            work[t].data_mut()[j] = orig + h;
            let (plus, _) = f(&work, false)?;
            work[t].data_mut()[j] = orig - h;
            let (minus, _) = f(&work, false)?;
            work[t].data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(GastonError::Numeric(format!(
                    "non-finite loss perturbing tensor {t} entry {j}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(grads[t].data()[j], numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (t, j);
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}
