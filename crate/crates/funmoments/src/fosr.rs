//! Function-on-scalar regression for the fixed-effect mean: pointwise linear
//! regression across the grid followed by coefficient smoothing.

use nalgebra::DMatrix;

use crate::basis::BasisSystem;
use crate::dataset::FunctionalDataset;
use crate::error::{Error, Result};

/// Fitted fixed-effect component.
#[derive(Debug, Clone)]
pub struct FosrFit {
    /// P x T pointwise OLS coefficients.
    pub beta_raw: DMatrix<f64>,
    /// P x T smoothed coefficient functions.
    pub beta_smooth: DMatrix<f64>,
    /// N x T residual curves after removing the smoothed mean.
    pub residuals: DMatrix<f64>,
    /// (X^t X)^-1 X^t, cached for reuse.
    pub design_pinv: DMatrix<f64>,
    /// REML smoothing parameter per coefficient function.
    pub lambdas: Vec<f64>,
}

/// Pseudo-inverse of a full-column-rank design; errors on rank deficiency.
pub fn design_pinv(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let xtx = x.transpose() * x;
    let chol = xtx
        .cholesky()
        .ok_or_else(|| Error::numeric("rank-deficient covariate design"))?;
    Ok(chol.solve(&x.transpose()))
}

/// Pointwise OLS across grid columns; the factorization of X is computed
/// once and reused for all T columns.
pub fn pointwise_ols(y: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if y.nrows() != x.nrows() {
        return Err(Error::data("Y and X row counts differ"));
    }
    if x.nrows() <= x.ncols() {
        return Err(Error::data("need more subjects than covariates"));
    }
    Ok(design_pinv(x)? * y)
}

/// Fit the fixed-effect mean: pointwise OLS, one REML smooth per coefficient
/// row, and residual curves against the smoothed mean.
pub fn fit_fosr(data: &FunctionalDataset, basis: &BasisSystem) -> Result<FosrFit> {
    let pinv = design_pinv(&data.x)?;
    let beta_raw = &pinv * &data.y;
    let p = beta_raw.nrows();
    let t = beta_raw.ncols();

    let ctx = basis.smoother()?;
    let mut beta_smooth = DMatrix::zeros(p, t);
    let mut lambdas = Vec::with_capacity(p);
    for row in 0..p {
        let y = beta_raw.row(row).transpose();
        let lambda = ctx.reml(&y)?;
        let fit = ctx.fit_at(&y, lambda);
        for col in 0..t {
            beta_smooth[(row, col)] = fit.fitted[col];
        }
        lambdas.push(lambda);
    }

    let residuals = &data.y - &data.x * &beta_smooth;
    Ok(FosrFit {
        beta_raw,
        beta_smooth,
        residuals,
        design_pinv: pinv,
        lambdas,
    })
}
