//! Multivariate Gaussian distributional regression.
//!
//! Every parameter of a `k`-variate normal response (the means and the
//! entries that specify the covariance) is linked to its own additive
//! predictor. The covariance is parameterized through either the basic
//! Cholesky factor `L^{-1}` of `Σ = L Lᵀ` or the modified Cholesky
//! decomposition `Σ^{-1} = Tᵀ D^{-1} T`, both of which yield a positive
//! definite `Σ` for any predictor values. Two variance-correlation
//! baselines (AR(1) and constant correlation) are provided for comparison.
//!
//! Module map:
//! - [`covparam`]: parameterizations of `Σ` and conversions among them.
//! - [`likelihood`]: log-likelihoods and predictor-scale derivatives.
//! - [`basis`]: design matrices and penalties for additive terms.
//! - [`estimate`]: penalized IWLS backfitting, AIC smoothing selection,
//!   and an IWLS-proposal Metropolis-Hastings sampler.
//! - [`predict_score`]: prediction, simulation, proper scores and CV.
//! - [`simgen`]: synthetic data generators with known truth.

pub mod basis;
pub mod covparam;
pub mod error;
pub mod estimate;
pub mod likelihood;
pub mod predict_score;
pub mod simgen;
pub mod table;

pub use error::{Error, Result};
pub use table::Table;
