//! Sequential estimation pipeline: fixed-effect mean, residual scores, and
//! covariate-dependent moment models, bundled into a [`MomentModel`].

use std::sync::Arc;

use crate::basis::{build_cyclic_basis, BasisSystem};
use crate::dataset::FunctionalDataset;
use crate::error::Result;
use crate::fosr::{fit_fosr, FosrFit};
use crate::momentfit::{
    fit_correlation_eigenmodel, fit_fourth_moments, fit_third_moments, fit_variance_model,
    scale_and_correlate, CorrelationModel,
};
use crate::scores::{decompose_residuals, ScoreSet};
use crate::surface::MomentModel;

/// Fit configuration shared by the CLI and the simulation harness.
#[derive(Debug, Clone)]
pub struct FitSettings {
    pub basis_degree: usize,
    pub n_knots: usize,
    pub domain: (f64, f64),
    /// Fit the third-moment model (needed for skewness surfaces).
    pub fit_third: bool,
    /// Fit the fourth-moment model (needed for kurtosis surfaces).
    pub fit_fourth: bool,
    /// Fit the covariate-dependent correlation eigenmodel instead of using
    /// the constant pooled correlation.
    pub eigen_correlation: bool,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            basis_degree: 3,
            n_knots: 24,
            domain: (0.0, 1.0),
            fit_third: true,
            fit_fourth: true,
            eigen_correlation: false,
        }
    }
}

/// Full pipeline output: mean fit, score decomposition, scaled scores, and
/// the assembled moment model.
#[derive(Debug, Clone)]
pub struct PipelineFit {
    pub fosr: FosrFit,
    pub scores: ScoreSet,
    pub xi_star: nalgebra::DMatrix<f64>,
    pub model: MomentModel,
}

/// Build the cyclic basis for a dataset grid under the given settings.
pub fn build_basis(settings: &FitSettings, grid: &[f64]) -> Result<Arc<BasisSystem>> {
    Ok(Arc::new(build_cyclic_basis(
        settings.basis_degree,
        settings.domain,
        settings.n_knots,
        grid,
    )?))
}

/// Run the sequential fit against a prebuilt basis (shared across bootstrap
/// replicates).
pub fn fit_with_basis(
    data: &FunctionalDataset,
    basis: &Arc<BasisSystem>,
    settings: &FitSettings,
) -> Result<PipelineFit> {
    let fosr = fit_fosr(data, basis)?;
    let scores = decompose_residuals(&fosr.residuals, &data.grid, basis)?;
    let variance = fit_variance_model(&scores.xi, &data.x)?;
    let (xi_star, c) = scale_and_correlate(&scores.xi, &data.x, &variance);
    let eigen = if settings.eigen_correlation {
        Some(fit_correlation_eigenmodel(&xi_star, &data.x)?)
    } else {
        None
    };
    let third = if settings.fit_third {
        Some(fit_third_moments(&xi_star, &data.x)?)
    } else {
        None
    };
    let fourth = if settings.fit_fourth {
        Some(fit_fourth_moments(&xi_star, &data.x)?)
    } else {
        None
    };
    let model = MomentModel {
        basis: basis.clone(),
        beta: fosr.beta_smooth.clone(),
        sigma2_eps: scores.sigma2_eps.clone(),
        variance,
        correlation: CorrelationModel { c, eigen },
        third,
        fourth,
    };
    Ok(PipelineFit {
        fosr,
        scores,
        xi_star,
        model,
    })
}

/// Build the basis and run the sequential fit.
pub fn fit_pipeline(data: &FunctionalDataset, settings: &FitSettings) -> Result<PipelineFit> {
    let basis = build_basis(settings, &data.grid)?;
    fit_with_basis(data, &basis, settings)
}
