//! Semiparametric sample-selection estimation without exclusion restrictions.
//!
//! The estimator runs in two steps: a sieve maximum-likelihood probit for the
//! selection probability on the full sample, then partial-linear sieve least
//! squares of the outcome on the covariates and a B-spline basis of the
//! fitted probabilities over the selected subsample. The crate also ships the
//! comparison estimators (two-part OLS, Heckman two-step and MLE, the
//! inverse-Mills oracle, Lee trimming bounds), the four built-in simulation
//! designs, and a seeded Monte Carlo harness.

pub mod baselines;
pub mod basis;
pub mod dgp;
mod error;
pub mod first_stage;
pub mod montecarlo;
pub mod numerics;
pub mod second_stage;
#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use numerics::{Matrix, RngStream};
