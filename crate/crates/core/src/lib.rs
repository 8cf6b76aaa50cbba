//! Continuous LASSO for functional linear regression on a grid.
//!
//! The slope function `lambda` lives on a finite grid with measure weights
//! `mu`, so the estimator is a measure-weighted LASSO. Around it sit the
//! diagnostics that control its risk: RKHS norms, alignment coefficients,
//! Dudley chaining bounds, Kolmogorov widths, approximate dimensions and
//! restricted isometry constants, plus a Monte Carlo harness.

pub mod cli;
pub mod complexity;
pub mod covariance;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod quadrature;
pub mod sampler;
pub mod solver;
pub mod sparsity;

pub use error::{Error, Result};
pub use exec::Execution;
