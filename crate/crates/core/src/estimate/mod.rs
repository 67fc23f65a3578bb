//! Model specification, penalized maximum likelihood and MCMC fitting.

pub mod mcmc;
pub mod pml;
mod problem;
pub mod spec;
pub mod state;

pub use mcmc::{
    autocorrelation, fit_mcmc, fit_mcmc_from, quantile, Band, BlockAcceptance, ChainState,
    McmcOptions,
};
pub use pml::{default_lambda_grid, fit_pml, select_smoothing, FitOptions, Smoothing};
pub use spec::{parse_formula, weather_specs, ModelSpec, ParamCounts};
pub use state::{FitState, ParamFit, TermFit};
