use crate::error::{param, Error, Result};

/// Central-difference gradient of `f` at `theta`.
pub fn finite_diff_grad(
    mut f: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return param(format!("finite-difference step must be positive, got {eps}"));
    }
    let mut x = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        x[i] = theta[i] + eps;
        let fp = f(&x);
        x[i] = theta[i] - eps;
        let fm = f(&x);
        x[i] = theta[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "objective not finite around coordinate {i}"
            )));
        }
        grad.push((fp - fm) / (2.0 * eps));
    }
    Ok(grad)
}
