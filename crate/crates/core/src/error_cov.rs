//! Models for the error covariance on a local window.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::local_design::LocalDesign;

/// Band width of the Toeplitz estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandWidth {
    Fixed(usize),
    /// `h* = max(1, round(constant * (n / ln n)^{1 / (2 rho)}))`.
    Auto { rho: f64, constant: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ErrorCovModel {
    IidKnown { sigma: f64 },
    /// `sigma` estimated on each window by the scaled Lasso.
    IidEstimated,
    /// Full `n x n` covariance of the errors.
    KnownMatrix(DMatrix<f64>),
    /// Banded Toeplitz estimate from pooled Lasso residuals.
    BandedEstimate(BandWidth),
}

impl Default for ErrorCovModel {
    fn default() -> Self {
        ErrorCovModel::IidEstimated
    }
}

impl ErrorCovModel {
    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            ErrorCovModel::IidKnown { sigma } if !(*sigma > 0.0) || !sigma.is_finite() => {
                Err(Error::invalid("sigma", format!("must be positive, got {sigma}")))
            }
            ErrorCovModel::KnownMatrix(s) => {
                if s.shape() != (n, n) {
                    return Err(Error::DimensionMismatch(format!(
                        "error covariance is {}x{}, expected {n}x{n}",
                        s.nrows(),
                        s.ncols()
                    )));
                }
                if s.diagonal().iter().any(|v| *v < 0.0 || !v.is_finite()) {
                    return Err(Error::InvalidData(
                        "error covariance has a negative or non-finite diagonal".into(),
                    ));
                }
                crate::local_design::check_psd(s, 1e-10)
            }
            ErrorCovModel::BandedEstimate(BandWidth::Auto { rho, constant }) => {
                if !(*rho > 0.5) {
                    return Err(Error::invalid("rho", format!("must exceed 1/2, got {rho}")));
                }
                if !(*constant > 0.0) {
                    return Err(Error::invalid("band constant", "must be positive"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Whether errors are iid, so the null distribution does not depend on `sigma`.
    pub fn is_iid(&self) -> bool {
        matches!(
            self,
            ErrorCovModel::IidKnown { .. } | ErrorCovModel::IidEstimated
        )
    }

    pub fn needs_residuals(&self) -> bool {
        matches!(self, ErrorCovModel::BandedEstimate(_))
    }
}

/// Serializable description of the models that need no external matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ErrorModelSpec {
    IidKnown {
        sigma: f64,
    },
    IidEstimated,
    Banded {
        /// Fixed band width; chosen from `rho` when absent.
        #[serde(default)]
        h: Option<usize>,
        #[serde(default = "default_rho")]
        rho: f64,
        #[serde(default = "default_constant")]
        constant: f64,
    },
}

fn default_rho() -> f64 {
    1.0
}

fn default_constant() -> f64 {
    1.0
}

impl ErrorModelSpec {
    pub fn build(&self) -> ErrorCovModel {
        match *self {
            ErrorModelSpec::IidKnown { sigma } => ErrorCovModel::IidKnown { sigma },
            ErrorModelSpec::IidEstimated => ErrorCovModel::IidEstimated,
            ErrorModelSpec::Banded { h: Some(h), .. } => {
                ErrorCovModel::BandedEstimate(BandWidth::Fixed(h))
            }
            ErrorModelSpec::Banded { h: None, rho, constant } => {
                ErrorCovModel::BandedEstimate(BandWidth::Auto { rho, constant })
            }
        }
    }
}

impl std::str::FromStr for ErrorModelSpec {
    type Err = Error;

    /// `iid_known[:SIGMA]`, `iid_estimated`, `banded[:h=H][:rho=R][:c=C]`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let name = parts.next().unwrap_or_default().to_ascii_lowercase();
        let bad = |what: &str| Error::invalid("error model", format!("{what} in `{s}`"));
        let spec = match name.as_str() {
            "iid_known" => {
                let sigma = match parts.next() {
                    Some(v) => v.parse().map_err(|_| bad("bad sigma"))?,
                    None => 1.0,
                };
                ErrorModelSpec::IidKnown { sigma }
            }
            "iid_estimated" => ErrorModelSpec::IidEstimated,
            "banded" => {
                let (mut h, mut rho, mut constant) = (None, default_rho(), default_constant());
                for part in parts.by_ref() {
                    let (key, value) = part.split_once('=').ok_or_else(|| bad("expected key=value"))?;
                    match key {
                        "h" => h = Some(value.parse().map_err(|_| bad("bad h"))?),
                        "rho" => rho = value.parse().map_err(|_| bad("bad rho"))?,
                        "c" => constant = value.parse().map_err(|_| bad("bad c"))?,
                        _ => return Err(bad("unknown key")),
                    }
                }
                ErrorModelSpec::Banded { h, rho, constant }
            }
            _ => return Err(bad("unknown model")),
        };
        if parts.next().is_some() {
            return Err(bad("trailing fields"));
        }
        spec.build().validate(0).or_else(|e| match e {
            Error::DimensionMismatch(_) => Ok(()),
            other => Err(other),
        })?;
        Ok(spec)
    }
}

/// Sample autocovariances `n^{-1} sum_i r_i r_{i+k}` for lags `0..=h`.
pub fn residual_autocovariance(residuals: &DVector<f64>, h: usize) -> Result<Vec<f64>> {
    let n = residuals.len();
    if h >= n {
        return Err(Error::invalid("h", format!("lag {h} must be below n = {n}")));
    }
    Ok((0..=h)
        .map(|k| {
            residuals
                .rows(0, n - k)
                .dot(&residuals.rows(k, n - k))
                / n as f64
        })
        .collect())
}

/// `m x m` symmetric Toeplitz matrix from `coeffs`, zero beyond lag `h`,
/// with the diagonal shifted up when needed to make it positive semi-definite.
pub fn band_covariance(coeffs: &[f64], h: usize, m: usize) -> Result<DMatrix<f64>> {
    if coeffs.len() < h + 1 {
        return Err(Error::invalid(
            "coeffs",
            format!("need {} autocovariances, got {}", h + 1, coeffs.len()),
        ));
    }
    let mut s = DMatrix::from_fn(m, m, |i, j| {
        let lag = i.abs_diff(j);
        if lag <= h {
            coeffs[lag]
        } else {
            0.0
        }
    });
    if h > 0 && m > 1 {
        let min = s
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if min < 0.0 {
            let shift = min.abs() + 1e-8;
            warn!("banded covariance is indefinite (min eigenvalue {min:e}); shifting diagonal by {shift:e}");
            for i in 0..m {
                s[(i, i)] += shift;
            }
        }
    }
    Ok(s)
}

/// Band width `max(1, round((n / ln n)^{1 / (2 rho)}))`.
pub fn select_band_width(n_local: usize, rho: f64) -> Result<usize> {
    select_band_width_scaled(n_local as f64, rho, 1.0)
}

pub fn select_band_width_scaled(n_local: f64, rho: f64, constant: f64) -> Result<usize> {
    if !(n_local >= 2.0) {
        return Err(Error::invalid("n_local", format!("must be at least 2, got {n_local}")));
    }
    if !(rho > 0.5) || rho.is_nan() {
        return Err(Error::invalid("rho", format!("must exceed 1/2, got {rho}")));
    }
    let h = constant * (n_local / n_local.ln()).powf(1.0 / (2.0 * rho));
    Ok((h.round() as usize).max(1))
}

/// Restriction of the error covariance to the window of `design`.
///
/// `residuals` are the pooled residuals over all `n` observations (banded
/// model); `sigma_hat` is the window's noise level (estimated iid model).
pub fn build_sigma_et(
    model: &ErrorCovModel,
    design: &LocalDesign,
    residuals: Option<&DVector<f64>>,
    sigma_hat: Option<f64>,
) -> Result<DMatrix<f64>> {
    let m = design.m();
    match model {
        ErrorCovModel::IidKnown { sigma } => Ok(DMatrix::identity(m, m) * (sigma * sigma)),
        ErrorCovModel::IidEstimated => {
            let s = sigma_hat.ok_or_else(|| {
                Error::invalid("sigma_hat", "estimated iid model needs a noise level")
            })?;
            Ok(DMatrix::identity(m, m) * (s * s))
        }
        ErrorCovModel::KnownMatrix(full) => {
            if let Some(&bad) = design.indices.iter().find(|&&i| i >= full.nrows()) {
                return Err(Error::DimensionMismatch(format!(
                    "window index {bad} outside the {}x{} covariance",
                    full.nrows(),
                    full.ncols()
                )));
            }
            Ok(full.select_rows(&design.indices).select_columns(&design.indices))
        }
        ErrorCovModel::BandedEstimate(width) => {
            let r = residuals.ok_or(Error::MissingResiduals)?;
            let h = band_width_for(*width, r.len())?;
            let coeffs = residual_autocovariance(r, h)?;
            // window rows are consecutive observations
            band_covariance(&coeffs, h.min(m.saturating_sub(1)), m)
        }
    }
}

pub(crate) fn band_width_for(width: BandWidth, n: usize) -> Result<usize> {
    let h = match width {
        BandWidth::Fixed(h) => h,
        BandWidth::Auto { rho, constant } => select_band_width_scaled(n as f64, rho, constant)?,
    };
    Ok(h.min(n.saturating_sub(1)))
}
