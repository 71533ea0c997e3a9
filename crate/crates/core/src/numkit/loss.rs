use crate::error::{Error, Result};

/// Elementwise Smooth-L1 (Huber with width `beta`), summed over elements:
/// `0.5 x^2 / beta` for `|x| < beta`, otherwise `|x| - 0.5 beta`.
pub fn smooth_l1(residual: &[f64], beta: f64) -> Result<f64> {
    check(residual, beta)?;
    Ok(residual.iter().map(|&x| smooth_l1_scalar(x, beta)).sum())
}

/// Derivative of [`smooth_l1`] with respect to each residual entry.
pub fn smooth_l1_grad(residual: &[f64], beta: f64) -> Result<Vec<f64>> {
    check(residual, beta)?;
    Ok(residual.iter().map(|&x| smooth_l1_scalar_grad(x, beta)).collect())
}

#[inline]
pub fn smooth_l1_scalar(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * x * x / beta
    } else {
        a - 0.5 * beta
    }
}

#[inline]
pub fn smooth_l1_scalar_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

fn check(residual: &[f64], beta: f64) -> Result<()> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidSpec(format!("smooth-L1 beta must be positive, got {beta}")));
    }
    if residual.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("smooth-L1 residual"));
    }
    Ok(())
}
