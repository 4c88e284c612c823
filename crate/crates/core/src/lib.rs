//! Pointwise inference for high-dimensional linear models with time-varying
//! coefficients: kernel-weighted Lasso, ridge-projection bias correction and
//! simultaneous tests calibrated by a Gaussian multiplier null.

pub mod error;
pub mod error_cov;
pub mod estimator;
pub mod graph;
pub mod inference;
pub mod lasso;
pub mod local_design;
pub mod simulate;
pub mod stats;

pub use error::{Error, ErrorKind, Result};
