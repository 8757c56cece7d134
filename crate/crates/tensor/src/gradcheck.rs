//! Central finite-difference checking of analytic gradients.

use crate::error::TensorError;
use crate::matrix::Matrix;

#[derive(Debug, Clone)]
pub struct FdReport {
    /// Maximum relative error per parameter tensor.
    pub per_param: Vec<f64>,
    pub max_rel_error: f64,
    /// `(parameter, entry)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub tol: f64,
    pub passed: bool,
}

/// `|a − b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `analytic[i]` against `(f(θ + h eᵢ) − f(θ − h eᵢ)) / 2h` for every
/// entry of every parameter. `params` is perturbed in place and restored.
pub fn finite_difference_check(
    params: &mut [Matrix],
    analytic: &[Matrix],
    h: f64,
    tol: f64,
    mut f: impl FnMut(&[Matrix]) -> f64,
) -> Result<FdReport, TensorError> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(TensorError::InvalidStep(h));
    }
    if params.len() != analytic.len() {
        return Err(TensorError::shape(
            "finite_difference_check",
            (params.len(), 0),
            (analytic.len(), 0),
        ));
    }
    for (p, g) in params.iter().zip(analytic) {
        if p.shape() != g.shape() {
            return Err(TensorError::shape(
                "finite_difference_check",
                p.shape(),
                g.shape(),
            ));
        }
    }

    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel_error = 0.0;
    let mut worst = None;
    for pi in 0..params.len() {
        let mut param_max = 0.0f64;
        for ei in 0..params[pi].len() {
            let original = params[pi].as_slice()[ei];
            params[pi].as_mut_slice()[ei] = original + h;
            let plus = f(params);
            params[pi].as_mut_slice()[ei] = original - h;
            let minus = f(params);
            params[pi].as_mut_slice()[ei] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(TensorError::NonFiniteObjective {
                    param: pi,
                    entry: ei,
                });
            }
            let numeric = (plus - minus) / (2.0 * h);
            let rel = relative_error(analytic[pi].as_slice()[ei], numeric);
            param_max = param_max.max(rel);
            if rel > max_rel_error || worst.is_none() {
                max_rel_error = rel.max(max_rel_error);
                worst = Some((pi, ei));
            }
        }
        per_param.push(param_max);
    }
    Ok(FdReport {
        per_param,
        max_rel_error,
        worst,
        tol,
        passed: max_rel_error <= tol,
    })
}
