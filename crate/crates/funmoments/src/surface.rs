//! Conditional moment surfaces assembled from a fitted model bundle:
//! covariance, correlation, lag correlation, skewness, excess kurtosis, and
//! variance ratios at arbitrary covariate vectors.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::basis::BasisSystem;
use crate::error::{Error, Result};
use crate::momentfit::{CorrelationModel, FourthMomentModel, ThirdMomentModel, VarianceModel};

/// Fitted bundle of all moment components on a common grid and covariate
/// design. Read-only evaluation; safe to share across threads.
#[derive(Debug, Clone)]
pub struct MomentModel {
    pub basis: Arc<BasisSystem>,
    /// P x T smoothed mean coefficient functions.
    pub beta: DMatrix<f64>,
    /// Noise variance on the grid.
    pub sigma2_eps: DVector<f64>,
    pub variance: VarianceModel,
    pub correlation: CorrelationModel,
    pub third: Option<ThirdMomentModel>,
    pub fourth: Option<FourthMomentModel>,
}

/// Which moment surface a conditional curve shows.
#[derive(Debug, Clone, PartialEq)]
pub enum CurveKind {
    Mean,
    Variance,
    /// Correlation with the point `lag` grid steps ahead, wrapping around
    /// the domain.
    CorrelationLag(usize),
    Skewness,
    ExcessKurtosis,
    /// Variance ratio against a second covariate vector.
    VarianceRatio(Vec<f64>),
}

/// A moment surface evaluated at one covariate vector over the grid.
#[derive(Debug, Clone)]
pub struct ConditionalCurve {
    pub covariate: Vec<f64>,
    pub kind: CurveKind,
    pub values: Vec<f64>,
}

impl MomentModel {
    pub fn n_points(&self) -> usize {
        self.beta.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.beta.nrows()
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_covariates() {
            return Err(Error::data(format!(
                "covariate vector has {} entries, model expects {}",
                x.len(),
                self.n_covariates()
            )));
        }
        Ok(())
    }

    /// Conditional mean x^t beta(s) over the grid.
    pub fn mean_curve(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let t = self.n_points();
        Ok((0..t)
            .map(|s| (0..x.len()).map(|p| x[p] * self.beta[(p, s)]).sum())
            .collect())
    }

    /// Weighted basis vector diag(exp(x^t gamma / 2)) phi(s) at grid index t.
    fn weighted_phi(&self, sd: &DVector<f64>, t: usize) -> DVector<f64> {
        let phi = self.basis.eval_matrix().row(t);
        DVector::from_fn(sd.len(), |j, _| sd[j] * phi[j])
    }

    /// Conditional covariance Sigma(s1, s2 | x) with the noise nugget on the
    /// diagonal (s1 == s2 by grid index).
    pub fn covariance(&self, x: &[f64], t1: usize, t2: usize) -> Result<f64> {
        self.check_x(x)?;
        let sd = self.variance.sd_factors(x);
        let c = self.correlation.at(x);
        Ok(self.covariance_inner(&sd, &c, t1, t2))
    }

    fn covariance_inner(&self, sd: &DVector<f64>, c: &DMatrix<f64>, t1: usize, t2: usize) -> f64 {
        let v1 = self.weighted_phi(sd, t1);
        let v2 = self.weighted_phi(sd, t2);
        let mut total = (v1.transpose() * c * v2)[(0, 0)];
        if t1 == t2 {
            total += self.sigma2_eps[t1];
        }
        total
    }

    /// Conditional variance curve Sigma(s, s | x).
    pub fn variance_curve(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let sd = self.variance.sd_factors(x);
        let c = self.correlation.at(x);
        Ok((0..self.n_points())
            .map(|t| self.covariance_inner(&sd, &c, t, t))
            .collect())
    }

    /// Full T x T conditional covariance matrix.
    pub fn covariance_matrix(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_x(x)?;
        let sd = self.variance.sd_factors(x);
        let c = self.correlation.at(x);
        let t = self.n_points();
        let mut out = DMatrix::zeros(t, t);
        // One pass through the weighted design keeps this O(T^2 J).
        let phi = self.basis.eval_matrix();
        let j = sd.len();
        let weighted = DMatrix::from_fn(t, j, |r, k| phi[(r, k)] * sd[k]);
        let core = &weighted * c * weighted.transpose();
        for r in 0..t {
            for s in 0..t {
                out[(r, s)] = core[(r, s)];
            }
            out[(r, r)] += self.sigma2_eps[r];
        }
        Ok(out)
    }

    /// Conditional correlation rho(s1, s2 | x).
    pub fn correlation_at(&self, x: &[f64], t1: usize, t2: usize) -> Result<f64> {
        self.check_x(x)?;
        let sd = self.variance.sd_factors(x);
        let c = self.correlation.at(x);
        let v1 = self.covariance_inner(&sd, &c, t1, t1);
        let v2 = self.covariance_inner(&sd, &c, t2, t2);
        if v1 <= 0.0 || v2 <= 0.0 {
            return Err(Error::numeric("zero variance in correlation denominator"));
        }
        Ok(self.covariance_inner(&sd, &c, t1, t2) / (v1 * v2).sqrt())
    }

    /// Correlation with the grid point `lag` steps ahead; the index wraps
    /// around the end of the domain.
    pub fn lag_correlation(&self, x: &[f64], t: usize, lag: usize) -> Result<f64> {
        let t2 = (t + lag) % self.n_points();
        self.correlation_at(x, t, t2)
    }

    /// Lag-correlation curve over every grid point.
    pub fn lag_correlation_curve(&self, x: &[f64], lag: usize) -> Result<Vec<f64>> {
        (0..self.n_points())
            .map(|t| self.lag_correlation(x, t, lag))
            .collect()
    }

    fn third_model(&self) -> Result<&ThirdMomentModel> {
        self.third
            .as_ref()
            .ok_or_else(|| Error::config("third-moment model was not fitted"))
    }

    fn fourth_model(&self) -> Result<&FourthMomentModel> {
        self.fourth
            .as_ref()
            .ok_or_else(|| Error::config("fourth-moment model was not fitted"))
    }

    /// Conditional skewness curve.
    pub fn skewness_curve(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let third = self.third_model()?;
        let sd = self.variance.sd_factors(x);
        let c = self.correlation.at(x);
        // Per-triple scalar: weight * (x^t delta) * sd_a sd_b sd_c.
        let coefs: Vec<f64> = third
            .triples
            .iter()
            .enumerate()
            .map(|(t, tri)| {
                let lin: f64 = (0..x.len()).map(|p| x[p] * third.delta[(p, t)]).sum();
                third.weights[t] * lin * sd[tri[0]] * sd[tri[1]] * sd[tri[2]]
            })
            .collect();
        let phi = self.basis.eval_matrix();
        let mut out = Vec::with_capacity(self.n_points());
        for t in 0..self.n_points() {
            let var = self.covariance_inner(&sd, &c, t, t);
            if var <= 0.0 {
                return Err(Error::numeric("zero variance in skewness denominator"));
            }
            let mut num = 0.0;
            for (k, tri) in third.triples.iter().enumerate() {
                num += coefs[k] * phi[(t, tri[0])] * phi[(t, tri[1])] * phi[(t, tri[2])];
            }
            out.push(num / var.powf(1.5));
        }
        Ok(out)
    }

    pub fn skewness(&self, x: &[f64], t: usize) -> Result<f64> {
        Ok(self.skewness_curve(x)?[t])
    }

    /// Conditional excess kurtosis curve (raw standardized fourth moment
    /// minus 3).
    pub fn excess_kurtosis_curve(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let fourth = self.fourth_model()?;
        let sd = self.variance.sd_factors(x);
        let c = self.correlation.at(x);
        let coefs: Vec<f64> = fourth
            .quadruples
            .iter()
            .enumerate()
            .map(|(t, q)| {
                let lin: f64 = (0..x.len()).map(|p| x[p] * fourth.eta[(p, t)]).sum();
                let u = if fourth.log_branch[t] { lin.exp() } else { lin };
                fourth.weights[t] * u * sd[q[0]] * sd[q[1]] * sd[q[2]] * sd[q[3]]
            })
            .collect();
        let phi = self.basis.eval_matrix();
        let mut out = Vec::with_capacity(self.n_points());
        for t in 0..self.n_points() {
            let total_var = self.covariance_inner(&sd, &c, t, t);
            if total_var <= 0.0 {
                return Err(Error::numeric("zero variance in kurtosis denominator"));
            }
            let noise = self.sigma2_eps[t];
            let var_b = total_var - noise;
            let mut k_sum = 0.0;
            for (k, q) in fourth.quadruples.iter().enumerate() {
                k_sum += coefs[k]
                    * phi[(t, q[0])]
                    * phi[(t, q[1])]
                    * phi[(t, q[2])]
                    * phi[(t, q[3])];
            }
            let fourth_central = k_sum + 3.0 * noise * noise + 6.0 * noise * var_b;
            out.push(fourth_central / (total_var * total_var) - 3.0);
        }
        Ok(out)
    }

    pub fn excess_kurtosis(&self, x: &[f64], t: usize) -> Result<f64> {
        Ok(self.excess_kurtosis_curve(x)?[t])
    }

    /// Pointwise variance ratio Sigma(s,s|x1) / Sigma(s,s|x2).
    pub fn variance_ratio_curve(&self, x1: &[f64], x2: &[f64]) -> Result<Vec<f64>> {
        let v1 = self.variance_curve(x1)?;
        let v2 = self.variance_curve(x2)?;
        v1.iter()
            .zip(&v2)
            .map(|(a, b)| {
                if *b <= 0.0 {
                    Err(Error::numeric("zero variance in ratio denominator"))
                } else {
                    Ok(a / b)
                }
            })
            .collect()
    }

    pub fn variance_ratio(&self, x1: &[f64], x2: &[f64], t: usize) -> Result<f64> {
        Ok(self.variance_ratio_curve(x1, x2)?[t])
    }

    /// Evaluate a named conditional curve.
    pub fn conditional_curve(&self, x: &[f64], kind: &CurveKind) -> Result<ConditionalCurve> {
        let values = match kind {
            CurveKind::Mean => self.mean_curve(x)?,
            CurveKind::Variance => self.variance_curve(x)?,
            CurveKind::CorrelationLag(lag) => self.lag_correlation_curve(x, *lag)?,
            CurveKind::Skewness => self.skewness_curve(x)?,
            CurveKind::ExcessKurtosis => self.excess_kurtosis_curve(x)?,
            CurveKind::VarianceRatio(x2) => self.variance_ratio_curve(x, x2)?,
        };
        Ok(ConditionalCurve {
            covariate: x.to_vec(),
            kind: kind.clone(),
            values,
        })
    }
}
