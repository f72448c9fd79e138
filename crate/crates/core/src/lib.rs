//! Channel estimation from one-bit quantized Gaussian observations.
//!
//! The model is `r = Q(A h + n)` with `A = a ⊗ I_N`, `h ~ N_C(0, C_h)`,
//! `n ~ N_C(0, C_n)` and `Q` the complex sign quantizer. The crate provides
//! the Bussgang (linearized LMMSE) estimator, conditional-mean estimators in
//! closed and numeric form, Gaussian orthant integrals, performance metrics
//! and a deterministic Monte-Carlo scenario runner.

// Negated comparisons are how NaN is rejected throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bussgang;
pub mod channel;
pub mod cme;
pub mod error;
pub mod gaussian;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod rng;
pub mod validation;

pub use error::{Error, Result};
