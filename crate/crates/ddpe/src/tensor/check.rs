//! Central finite-difference verification of analytic gradients.

use super::{Scalar, Tensor};
use crate::error::{bail, Result};

/// Compares analytic gradients against central differences of `f`.
///
/// `f` evaluates the scalar loss for the current parameter values; it is
/// called twice per sampled coordinate with a `±eps` perturbation. The
/// returned figure is the maximum of
/// `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)` over the
/// sampled coordinates. At least `min_coords` coordinates are sampled
/// (deterministically, evenly spaced) when the parameters have that many.
pub fn finite_diff_check<S, F>(
    f: &mut F,
    params: &mut [Tensor<S>],
    analytic: &[Vec<S>],
    eps: f64,
    min_coords: usize,
) -> Result<f64>
where
    S: Scalar,
    F: FnMut(&[Tensor<S>]) -> Result<S>,
{
    if analytic.len() != params.len() {
        bail!(
            Contract,
            "finite_diff_check: {} gradient slots for {} parameters",
            analytic.len(),
            params.len()
        );
    }
    let total: usize = params.iter().map(|p| p.numel()).sum();
    if total == 0 {
        return Ok(0.0);
    }
    let desired = min_coords.max(params.len()).min(total);
    let eps_s = super::cast::<S>(eps);

    let mut worst = 0.0f64;
    for pi in 0..params.len() {
        let n = params[pi].numel();
        if n == 0 {
            continue;
        }
        if analytic[pi].len() != n {
            bail!(
                Contract,
                "finite_diff_check: gradient {pi} has {} entries for {n} parameters",
                analytic[pi].len()
            );
        }
        // proportional share of the coordinate budget, at least one
        let quota = (desired * n).div_ceil(total).clamp(1, n);
        for j in 0..quota {
            let idx = j * n / quota;
            let orig = params[pi].data()[idx];
            params[pi].data_mut()[idx] = orig + eps_s;
            let plus = f(params)?.to_f64().unwrap();
            params[pi].data_mut()[idx] = orig - eps_s;
            let minus = f(params)?.to_f64().unwrap();
            params[pi].data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let exact = analytic[pi][idx].to_f64().unwrap();
            let rel = (exact - numeric).abs() / (exact.abs() + numeric.abs() + 1e-12);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
