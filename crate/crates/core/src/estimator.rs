//! Time-varying ridge estimator and its Lasso-based bias correction.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::local_design::SpectralDesign;

/// Estimates at one time point.
#[derive(Debug, Clone)]
pub struct PointEstimate {
    pub t: f64,
    /// Kernel-weighted Lasso.
    pub beta_tilde: DVector<f64>,
    /// Time-varying ridge.
    pub theta_tilde: DVector<f64>,
    /// Bias-corrected estimate `theta_tilde - b_tilde`.
    pub beta_hat: DVector<f64>,
    /// Estimated projection bias `(P - I) beta_tilde`.
    pub b_tilde: DVector<f64>,
}

/// `(X_t^T X_t + lambda2 I)^{-1} X_t^T Y_t` through the thin SVD.
pub fn tv_ridge(sd: &SpectralDesign, lambda2: f64) -> Result<DVector<f64>> {
    if !(lambda2 > 0.0) || !lambda2.is_finite() {
        return Err(Error::invalid("lambda2", format!("must be positive, got {lambda2}")));
    }
    Ok(ridge_map(sd, &sd.design().yt, lambda2))
}

/// Applies the ridge map to an arbitrary weighted response vector.
pub(crate) fn ridge_map(sd: &SpectralDesign, yt: &DVector<f64>, lambda2: f64) -> DVector<f64> {
    let p = sd.design().p();
    if sd.rank() == 0 {
        return DVector::zeros(p);
    }
    let mut c = sd.u().tr_mul(yt);
    for (ca, &d) in c.iter_mut().zip(sd.singular_values().iter()) {
        *ca *= d / (d * d + lambda2);
    }
    sd.q() * c
}

/// Corrects the ridge estimate by the projection bias estimated from the Lasso.
pub fn bias_correct(
    theta_tilde: DVector<f64>,
    beta_tilde: DVector<f64>,
    sd: &SpectralDesign,
) -> Result<PointEstimate> {
    let p = sd.design().p();
    if theta_tilde.len() != p || beta_tilde.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "expected length {p}, got ridge {} and lasso {}",
            theta_tilde.len(),
            beta_tilde.len()
        )));
    }
    let b_tilde = sd.project(&beta_tilde) - &beta_tilde;
    let beta_hat = &theta_tilde - &b_tilde;
    Ok(PointEstimate {
        t: sd.design().t,
        beta_tilde,
        theta_tilde,
        beta_hat,
        b_tilde,
    })
}
