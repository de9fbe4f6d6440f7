//! Regressions of score moments on covariates: log-linear variance via
//! quasi-Poisson IRLS, empirical correlation of the scaled scores, an
//! optional covariate-dependent correlation eigenmodel, and third/fourth
//! cross-moment models.
//!
//! Cross-moment regressions are stored per sorted index tuple with
//! multinomial weights; at J=24 the ordered sums have 24^3 and 24^4 terms but
//! only 2,600 triples and 17,550 quadruples are distinct, and all OLS
//! regressions share one projector.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::fosr::design_pinv;

const IRLS_MAX_ITER: usize = 100;
const IRLS_TOL: f64 = 1e-8;
/// Products beyond this magnitude are data errors, not modeling targets.
const PRODUCT_LIMIT: f64 = 1e12;

/// Log-linear conditional variance of the scores:
/// Var(xi_j | x) = exp(x^t gamma_j).
#[derive(Debug, Clone)]
pub struct VarianceModel {
    /// P x J; column j holds gamma_j.
    pub gamma: DMatrix<f64>,
}

impl VarianceModel {
    /// exp(x^t gamma_j / 2) for every j.
    pub fn sd_factors(&self, x: &[f64]) -> DVector<f64> {
        let j = self.gamma.ncols();
        DVector::from_fn(j, |k, _| {
            let lin: f64 = (0..self.gamma.nrows()).map(|p| x[p] * self.gamma[(p, k)]).sum();
            (0.5 * lin).exp()
        })
    }
}

/// Correlation of the scaled scores, optionally extended with a
/// covariate-dependent eigenvalue model.
#[derive(Debug, Clone)]
pub struct CorrelationModel {
    pub c: DMatrix<f64>,
    pub eigen: Option<CorrelationEigenModel>,
}

/// C(x) = sum_j exp(x^t gamma_j) U_j U_j^t over the marginal eigenvectors of
/// the pooled correlation.
#[derive(Debug, Clone)]
pub struct CorrelationEigenModel {
    /// J x J orthonormal eigenvector columns, sorted by decreasing pooled
    /// eigenvalue.
    pub vectors: DMatrix<f64>,
    /// P x J per-direction log-eigenvalue coefficients.
    pub gamma: DMatrix<f64>,
}

impl CorrelationModel {
    /// Correlation matrix at covariates x (pooled C unless the eigenmodel is
    /// fitted).
    pub fn at(&self, x: &[f64]) -> DMatrix<f64> {
        match &self.eigen {
            None => self.c.clone(),
            Some(e) => {
                let j = e.vectors.nrows();
                let mut out = DMatrix::zeros(j, j);
                for k in 0..j {
                    let lin: f64 = (0..e.gamma.nrows()).map(|p| x[p] * e.gamma[(p, k)]).sum();
                    let w = lin.exp();
                    let u = e.vectors.column(k);
                    for r in 0..j {
                        for c in 0..j {
                            out[(r, c)] += w * u[r] * u[c];
                        }
                    }
                }
                out
            }
        }
    }
}

/// Third cross-moment model E(xi*_a xi*_b xi*_c | x) = x^t delta_{a,b,c} over
/// sorted triples.
#[derive(Debug, Clone)]
pub struct ThirdMomentModel {
    pub triples: Vec<[usize; 3]>,
    /// Multinomial weight expanding each sorted triple to ordered sums.
    pub weights: Vec<f64>,
    /// P x (number of triples); column t holds delta for triples[t].
    pub delta: DMatrix<f64>,
}

/// Fourth cross-moment model over sorted quadruples; even-multiplicity
/// patterns use a log link, the rest are linear.
#[derive(Debug, Clone)]
pub struct FourthMomentModel {
    pub quadruples: Vec<[usize; 4]>,
    pub weights: Vec<f64>,
    /// P x (number of quadruples).
    pub eta: DMatrix<f64>,
    /// True where every index in the quadruple has even multiplicity.
    pub log_branch: Vec<bool>,
}

/// Sorted index triples j1 <= j2 <= j3 over 0..j.
pub fn sorted_triples(j: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::with_capacity(j * (j + 1) * (j + 2) / 6);
    for a in 0..j {
        for b in a..j {
            for c in b..j {
                out.push([a, b, c]);
            }
        }
    }
    out
}

/// Sorted index quadruples over 0..j.
pub fn sorted_quadruples(j: usize) -> Vec<[usize; 4]> {
    let mut out = Vec::new();
    for a in 0..j {
        for b in a..j {
            for c in b..j {
                for d in c..j {
                    out.push([a, b, c, d]);
                }
            }
        }
    }
    out
}

/// Number of ordered arrangements of a sorted tuple: k! / prod(count!).
pub fn multiplicity_weight(tuple: &[usize]) -> f64 {
    let mut fact = 1.0;
    for i in 2..=tuple.len() {
        fact *= i as f64;
    }
    let mut i = 0;
    while i < tuple.len() {
        let mut run = 1;
        while i + run < tuple.len() && tuple[i + run] == tuple[i] {
            run += 1;
        }
        for r in 2..=run {
            fact /= r as f64;
        }
        i += run;
    }
    fact
}

/// True when every distinct index appears an even number of times
/// (multiplicity patterns (4) and (2,2)).
pub fn is_even_multiplicity(quad: &[usize; 4]) -> bool {
    let mut i = 0;
    while i < 4 {
        let mut run = 1;
        while i + run < 4 && quad[i + run] == quad[i] {
            run += 1;
        }
        if run % 2 == 1 {
            return false;
        }
        i += run;
    }
    true
}

/// Quasi-Poisson point estimate for a log-link mean regression of a
/// nonnegative response, by iteratively reweighted least squares with step
/// halving. The dispersion does not enter the point estimate.
pub fn fit_variance_glm(response: &DVector<f64>, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = response.len();
    if n != x.nrows() {
        return Err(Error::data("GLM response length does not match design"));
    }
    if response.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::data("GLM response must be finite and nonnegative"));
    }
    let ybar = response.sum() / n as f64;
    if ybar == 0.0 {
        return Err(Error::data("all-zero response in log-link regression"));
    }
    let p = x.ncols();

    let mut eta = DVector::from_fn(n, |i, _| (response[i] + 0.1 * ybar).ln());
    let mut gamma = DVector::zeros(p);
    let mut dev = quasi_poisson_deviance(response, &eta);
    let mut first = true;

    for _ in 0..IRLS_MAX_ITER {
        let mu = eta.map(f64::exp);
        // Weighted normal equations with weights mu and working response
        // z = eta + (y - mu) / mu.
        let mut xtwx = DMatrix::zeros(p, p);
        let mut xtwz = DVector::zeros(p);
        for i in 0..n {
            let w = mu[i];
            let z = eta[i] + (response[i] - mu[i]) / mu[i];
            for a in 0..p {
                let xa = x[(i, a)];
                xtwz[a] += w * xa * z;
                for b in a..p {
                    xtwx[(a, b)] += w * xa * x[(i, b)];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                xtwx[(a, b)] = xtwx[(b, a)];
            }
        }
        let chol = xtwx
            .cholesky()
            .ok_or_else(|| Error::numeric("singular weighted design in IRLS"))?;
        let proposal = chol.solve(&xtwz);

        // Step-halve toward the previous coefficients if the deviance rises.
        let mut accepted = None;
        let mut step = 1.0;
        for _ in 0..30 {
            let cand = if first {
                proposal.clone()
            } else {
                &gamma + (&proposal - &gamma) * step
            };
            let eta_cand = x * &cand;
            if eta_cand.iter().all(|v| v.is_finite() && v.abs() < 500.0) {
                let dev_cand = quasi_poisson_deviance(response, &eta_cand);
                if dev_cand.is_finite() && (first || dev_cand <= dev + 1e-8) {
                    accepted = Some((cand, eta_cand, dev_cand));
                    break;
                }
            }
            step *= 0.5;
        }
        let (cand, eta_cand, dev_cand) =
            accepted.ok_or_else(|| Error::numeric("IRLS step rejected repeatedly"))?;
        let delta = (&cand - &gamma).amax();
        gamma = cand;
        eta = eta_cand;
        dev = dev_cand;
        if !first && delta < IRLS_TOL {
            return Ok(gamma);
        }
        first = false;
    }
    Err(Error::numeric(format!(
        "quasi-Poisson IRLS did not converge in {IRLS_MAX_ITER} iterations"
    )))
}

fn quasi_poisson_deviance(y: &DVector<f64>, eta: &DVector<f64>) -> f64 {
    let mut dev = 0.0;
    for i in 0..y.len() {
        let mu = eta[i].exp();
        let yi = y[i];
        let term = if yi > 0.0 { yi * (yi.ln() - eta[i]) } else { 0.0 };
        dev += 2.0 * (term - (yi - mu));
    }
    dev
}

/// Fit one variance GLM per score column.
pub fn fit_variance_model(xi: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<VarianceModel> {
    let j = xi.ncols();
    let p = x.ncols();
    let mut gamma = DMatrix::zeros(p, j);
    for k in 0..j {
        let sq = DVector::from_fn(xi.nrows(), |i, _| xi[(i, k)] * xi[(i, k)]);
        let g = fit_variance_glm(&sq, x)?;
        for a in 0..p {
            gamma[(a, k)] = g[a];
        }
    }
    Ok(VarianceModel { gamma })
}

/// Scale scores to unit conditional variance and take their empirical
/// correlation.
pub fn scale_and_correlate(
    xi: &DMatrix<f64>,
    x: &DMatrix<f64>,
    variance: &VarianceModel,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, j) = (xi.nrows(), xi.ncols());
    let mut xi_star = DMatrix::zeros(n, j);
    for i in 0..n {
        let xrow: Vec<f64> = (0..x.ncols()).map(|p| x[(i, p)]).collect();
        let sd = variance.sd_factors(&xrow);
        for k in 0..j {
            xi_star[(i, k)] = xi[(i, k)] / sd[k];
        }
    }
    let c = pearson_correlation(&xi_star);
    (xi_star, c)
}

/// Pearson correlation of the columns (population denominator).
pub fn pearson_correlation(m: &DMatrix<f64>) -> DMatrix<f64> {
    let z = standardize_columns(m);
    let n = m.nrows() as f64;
    let mut c = z.transpose() * &z / n;
    for k in 0..c.nrows() {
        c[(k, k)] = 1.0;
    }
    0.5 * (&c + c.transpose())
}

fn standardize_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, j) = (m.nrows(), m.ncols());
    let mut z = m.clone();
    for k in 0..j {
        let mean = m.column(k).mean();
        let var = m.column(k).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let sd = var.sqrt().max(1e-300);
        for i in 0..n {
            z[(i, k)] = (m[(i, k)] - mean) / sd;
        }
    }
    z
}

/// Covariate-dependent correlation eigenmodel: squared projections of the
/// standardized scaled scores on the pooled eigenvectors, regressed on x
/// through the variance GLM.
pub fn fit_correlation_eigenmodel(
    xi_star: &DMatrix<f64>,
    x: &DMatrix<f64>,
) -> Result<CorrelationEigenModel> {
    let z = standardize_columns(xi_star);
    let n = z.nrows() as f64;
    let raw = z.transpose() * &z / n;
    let c = 0.5 * (&raw + raw.transpose());
    let j = c.nrows();
    let eig = SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..j).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vectors = DMatrix::from_fn(j, j, |r, k| eig.eigenvectors[(r, order[k])]);

    let p = x.ncols();
    let mut gamma = DMatrix::zeros(p, j);
    let projected = &z * &vectors; // N x J
    for k in 0..j {
        let sq = DVector::from_fn(z.nrows(), |i, _| projected[(i, k)] * projected[(i, k)]);
        let g = fit_variance_glm(&sq, x)?;
        for a in 0..p {
            gamma[(a, k)] = g[a];
        }
    }
    Ok(CorrelationEigenModel { vectors, gamma })
}

fn tuple_products(
    xi_star: &DMatrix<f64>,
    tuples: &[Vec<usize>],
) -> Result<DMatrix<f64>> {
    let n = xi_star.nrows();
    let mut prod = DMatrix::zeros(n, tuples.len());
    for (t, tuple) in tuples.iter().enumerate() {
        for i in 0..n {
            let mut v = 1.0;
            for &k in tuple {
                v *= xi_star[(i, k)];
            }
            if v.abs() > PRODUCT_LIMIT {
                return Err(Error::data(format!(
                    "score product of magnitude {v:.3e} exceeds 1e12 (subject {}, tuple {:?})",
                    i + 1,
                    tuple
                )));
            }
            prod[(i, t)] = v;
        }
    }
    Ok(prod)
}

/// OLS of every sorted-triple product on x through one shared projector.
pub fn fit_third_moments(xi_star: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<ThirdMomentModel> {
    if xi_star.nrows() <= x.ncols() {
        return Err(Error::data("need more subjects than covariates"));
    }
    let triples = sorted_triples(xi_star.ncols());
    let weights: Vec<f64> = triples.iter().map(|t| multiplicity_weight(t)).collect();
    let tuples: Vec<Vec<usize>> = triples.iter().map(|t| t.to_vec()).collect();
    let products = tuple_products(xi_star, &tuples)?;
    let pinv = design_pinv(x)?;
    let delta = &pinv * &products;
    Ok(ThirdMomentModel {
        triples,
        weights,
        delta,
    })
}

/// Sorted-quadruple products regressed on x: log-link quasi-Poisson for
/// even-multiplicity patterns, OLS otherwise (batched through the shared
/// projector).
pub fn fit_fourth_moments(xi_star: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<FourthMomentModel> {
    if xi_star.nrows() <= x.ncols() {
        return Err(Error::data("need more subjects than covariates"));
    }
    let quadruples = sorted_quadruples(xi_star.ncols());
    let weights: Vec<f64> = quadruples.iter().map(|t| multiplicity_weight(t)).collect();
    let log_branch: Vec<bool> = quadruples.iter().map(is_even_multiplicity).collect();
    let tuples: Vec<Vec<usize>> = quadruples.iter().map(|t| t.to_vec()).collect();
    let products = tuple_products(xi_star, &tuples)?;
    let pinv = design_pinv(x)?;
    // One matrix product covers every linear-branch quadruple; the log-branch
    // columns are overwritten below.
    let mut eta = &pinv * &products;
    for (t, &log_link) in log_branch.iter().enumerate() {
        if !log_link {
            continue;
        }
        let response = DVector::from_fn(products.nrows(), |i, _| products[(i, t)]);
        let g = fit_variance_glm(&response, x)?;
        for a in 0..x.ncols() {
            eta[(a, t)] = g[a];
        }
    }
    Ok(FourthMomentModel {
        quadruples,
        weights,
        eta,
        log_branch,
    })
}
