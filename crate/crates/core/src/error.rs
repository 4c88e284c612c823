use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad category of a failure, used by front-ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad configuration or parameter values.
    Config,
    /// Malformed or inconsistent input data.
    Data,
    /// A numerical routine failed.
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("time point {t} lies outside the interior interval [{lo}, {hi}]")]
    Boundary { t: f64, lo: f64, hi: f64 },

    #[error("bandwidth {bandwidth} leaves an empty neighborhood at t = {t} (n = {n})")]
    DegenerateBandwidth { t: f64, bandwidth: f64, n: usize },

    #[error("singular value decomposition failed: {0}")]
    Svd(String),

    #[error("matrix is not positive semi-definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error(
        "lasso did not converge after {iterations} sweeps (KKT residual {kkt_residual:e})"
    )]
    LassoNonConvergence {
        iterations: usize,
        kkt_residual: f64,
        last_iterate: Vec<f64>,
    },

    #[error("scaled lasso did not converge after {rounds} rounds (sigma trace {trace:?})")]
    ScaledLassoNonConvergence { rounds: usize, trace: Vec<f64> },

    #[error("cross-validation failed for every penalty on the grid")]
    CrossValidationFailed,

    #[error("ridge variance of coefficient {index} is not positive ({value:e})")]
    DegenerateVariance { index: usize, value: f64 },

    #[error("banded error covariance requires residuals")]
    MissingResiduals,

    #[error("node `{node}` at t = {t}: {source}")]
    Node {
        node: String,
        t: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidParameter { .. } | Error::Boundary { .. } => ErrorKind::Config,
            Error::DegenerateBandwidth { .. } => ErrorKind::Config,
            Error::DimensionMismatch(_) | Error::InvalidData(_) | Error::MissingResiduals => {
                ErrorKind::Data
            }
            Error::Svd(_)
            | Error::NotPsd { .. }
            | Error::LassoNonConvergence { .. }
            | Error::ScaledLassoNonConvergence { .. }
            | Error::CrossValidationFailed
            | Error::DegenerateVariance { .. } => ErrorKind::Numerical,
            Error::Stage { source, .. } | Error::Node { source, .. } => source.kind(),
        }
    }

    /// Innermost error, skipping stage labels.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } | Error::Node { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
