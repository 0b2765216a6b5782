pub mod analytics;
pub mod error;
pub mod grid;
pub mod harness;
pub mod interp;
pub mod model;
pub mod particle;
pub mod rng;
pub mod semidiscrete;

pub use error::{Error, Result};
