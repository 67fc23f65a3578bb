//! Command-line driver for `cholgauss`: data simulation, fitting,
//! prediction, scoring, cross-validation and the simulation experiments.

pub mod commands;
pub mod experiments;
