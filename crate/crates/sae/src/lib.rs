//! Small area estimation under the nested error regression model.
//!
//! The crate is organised around four layers:
//! - [`model`]: domain types (population frames, samples, parameters) and
//!   design-matrix construction with area-mean centering and contextual means;
//! - [`fit`]: ML/REML estimation of the variance components via a profiled
//!   one-dimensional search, plus the plug-in asymptotic covariance;
//! - [`predict`]: per-area point predictors (composite, synthetic, and their
//!   fixed-effects counterparts), MSE estimators and prediction intervals;
//! - [`sim`]: reproducible model-based and design-based Monte Carlo harness.

pub mod error;
pub mod fit;
pub mod io;
pub mod model;
pub mod predict;
pub mod sim;

pub use error::SaeError;

/// Crate result alias.
pub type Result<T> = std::result::Result<T, SaeError>;
