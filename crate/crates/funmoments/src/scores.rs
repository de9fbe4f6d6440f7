//! Per-subject basis scores extracted from residual curves, and the smooth
//! noise-variance function.

use nalgebra::{DMatrix, DVector};

use crate::basis::BasisSystem;
use crate::error::{Error, Result};
use crate::smooth::smooth_curve;

/// Variance floor keeping downstream correlation and skewness denominators
/// finite.
pub const NOISE_VARIANCE_FLOOR: f64 = 1e-8;

/// Score decomposition of the residual curves.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    /// N x J estimated scores.
    pub xi: DMatrix<f64>,
    /// Shared smoothing parameter used for every subject.
    pub lambda_scores: f64,
    /// N x T leftover noise curves: residual - basis * xi.
    pub noise: DMatrix<f64>,
    /// Smooth noise-variance function on the grid (floored at 1e-8).
    pub sigma2_eps: DVector<f64>,
}

/// Extract scores with one shared lambda chosen by REML on the stacked
/// all-subject regression; the ridge system is factorized once and reused
/// for all N right-hand sides.
pub fn extract_scores(residuals: &DMatrix<f64>, basis: &BasisSystem) -> Result<(DMatrix<f64>, f64)> {
    let ctx = basis.smoother()?;
    let lambda = ctx.reml_shared(residuals)?;
    let xi = ctx.solve_many(residuals, lambda);
    Ok((xi, lambda))
}

/// Extract scores at a caller-fixed lambda (used by tests and diagnostics).
pub fn extract_scores_at(
    residuals: &DMatrix<f64>,
    basis: &BasisSystem,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    if lambda < 0.0 {
        return Err(Error::config("negative smoothing parameter"));
    }
    let ctx = basis.smoother()?;
    Ok(ctx.solve_many(residuals, lambda))
}

/// Column means of squared noise, smoothed on the grid and floored.
pub fn estimate_noise_variance(
    noise: &DMatrix<f64>,
    grid: &[f64],
    basis: &BasisSystem,
) -> Result<DVector<f64>> {
    if noise.nrows() < 2 {
        return Err(Error::data("noise variance needs at least two subjects"));
    }
    let n = noise.nrows() as f64;
    let mean_sq: Vec<f64> = (0..noise.ncols())
        .map(|c| noise.column(c).iter().map(|v| v * v).sum::<f64>() / n)
        .collect();
    let fitted = smooth_curve(&mean_sq, grid, basis)?;
    Ok(DVector::from_iterator(
        fitted.len(),
        fitted.into_iter().map(|v| v.max(NOISE_VARIANCE_FLOOR)),
    ))
}

/// Full residual decomposition: scores, leftover noise, and the smooth noise
/// variance, satisfying residual = basis * xi + noise per subject.
pub fn decompose_residuals(
    residuals: &DMatrix<f64>,
    grid: &[f64],
    basis: &BasisSystem,
) -> Result<ScoreSet> {
    let (xi, lambda_scores) = extract_scores(residuals, basis)?;
    let noise = residuals - &xi * basis.eval_matrix().transpose();
    let sigma2_eps = estimate_noise_variance(&noise, grid, basis)?;
    Ok(ScoreSet {
        xi,
        lambda_scores,
        noise,
        sigma2_eps,
    })
}
