//! Exact high-dimensional asymptotics for convex empirical risk minimization
//! in multi-index models, with finite-n Monte Carlo validation.

pub mod asymptotics;
pub mod cli;
pub mod config;
pub mod error;
pub mod linalg;
pub mod linmodel;
pub mod prox;
pub mod quadrature;
pub mod simulator;
pub mod spectrum;

pub use error::{Error, Result};
