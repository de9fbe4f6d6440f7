//! Covariate-conditional moment regression for functional data.
//!
//! This crate estimates how the mean, variance, correlation, skewness, and
//! excess kurtosis of curve-valued observations depend on scalar covariates.
//! The estimation pipeline is deliberately sequential:
//!
//! 1. [`fosr`] fits the fixed-effect mean by pointwise regression followed by
//!    penalized cyclic-spline smoothing of the coefficient functions.
//! 2. [`scores`] projects the residual curves on the spline basis to obtain
//!    per-subject scores and a smooth noise-variance function.
//! 3. [`momentfit`] regresses score moments on covariates: a log-linear
//!    variance model fitted by quasi-Poisson IRLS, the empirical correlation
//!    of the scaled scores (optionally a covariate-dependent eigenmodel), and
//!    linear/log-linear models for third and fourth cross-moments.
//! 4. [`surface`] assembles conditional covariance, correlation, skewness,
//!    and excess-kurtosis curves from the fitted components.
//! 5. [`bands`] wraps the whole pipeline in a subject-level bootstrap and
//!    builds Wald and symmetric/asymmetric simultaneous confidence bands.
//!
//! [`sim`] provides the non-Gaussian data-generating process used by the
//! coverage and integrated-squared-error experiments, and [`cli`] exposes the
//! `simulate`, `fit`, `bands`, and `coverage` subcommands of the thin binary.
//!
//! Runnable walkthroughs for each capability live in `examples/`.

pub mod bands;
pub mod basis;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod dist;
pub mod error;
pub mod fosr;
pub mod io;
pub mod momentfit;
pub mod pipeline;
pub mod scores;
pub mod seed;
pub mod sim;
pub mod smooth;
pub mod surface;

pub use error::{Error, Result};
