//! Central finite-difference gradient checker.

use crate::error::{Error, Result};

/// Max over coordinates of `|analytic - central FD| / (|analytic| + 1e-8)`.
///
/// `loss` must be a scalar function evaluable at perturbed parameters.
pub fn grad_check(
    loss: impl Fn(&[f64]) -> Result<f64>,
    params: &[f64],
    analytic: &[f64],
    h: f64,
) -> Result<f64> {
    if params.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "grad_check: params {} != analytic {}",
            params.len(),
            analytic.len()
        )));
    }
    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + h;
        let up = loss(&work)?;
        work[i] = orig - h;
        let down = loss(&work)?;
        work[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "grad_check: non-finite loss at coordinate {i}"
            )));
        }
        let fd = (up - down) / (2.0 * h);
        let disc = (analytic[i] - fd).abs() / (analytic[i].abs() + 1e-8);
        worst = worst.max(disc);
    }
    Ok(worst)
}
