//! Experiment harness: configuration, convergence studies, fits and outputs.

pub mod config;
pub mod convergence;
pub mod fit;
pub mod commands;
pub mod output;
