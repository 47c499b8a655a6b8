//! Numerical toolkit for one-dimensional multiscale diffusions and their
//! homogenization limits.
//!
//! The crate computes the analytic quantities of the limit (cell constants,
//! invariant densities, scale functions, Poisson solutions and asymptotic
//! variances), simulates the multiscale SDE with reproducible per-replicate
//! random streams, and runs ergodic-average, central-limit and drift-estimation
//! experiments over coupled schedules `T_eps = C eps^(-eta)`.

// negated float comparisons are used so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod model;
pub mod poisson;
pub mod quadrature;
pub mod sdesim;
pub mod stats;

pub use error::{Error, Result};
