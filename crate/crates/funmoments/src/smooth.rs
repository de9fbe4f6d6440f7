//! Penalized least squares with curvature penalty and REML selection of the
//! smoothing parameter.
//!
//! All smoothing in the pipeline goes through this module. The REML criterion
//! is profiled over the error variance and evaluated through a one-time
//! eigendecomposition, so a lambda search costs O(J) per candidate.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::basis::BasisSystem;
use crate::error::{Error, Result};

/// Search bracket for log10(lambda) and the golden-section tolerance.
pub const LOG10_LAMBDA_RANGE: (f64, f64) = (-8.0, 12.0);
const LOG10_LAMBDA_TOL: f64 = 1e-4;
const GRID_POINTS: usize = 41;

/// Result of a penalized least-squares fit.
#[derive(Debug, Clone)]
pub struct PenalizedFit {
    pub coefficients: DVector<f64>,
    pub lambda: f64,
    /// Effective degrees of freedom: trace of the hat matrix.
    pub edf: f64,
    pub fitted: DVector<f64>,
}

/// Reusable spectral decomposition of a (design, penalty) pair.
///
/// With XtX = L L^t and S = L^-1 P L^-t = V diag(s) V^t, every quantity the
/// REML criterion needs becomes diagonal in lambda.
#[derive(Debug)]
pub struct SmootherContext {
    design: DMatrix<f64>,
    eigvals: DVector<f64>,
    /// W = V^t L^-1; z = W (X^t y), coefficients = W^t diag(1/(1+lambda s)) z.
    transform: DMatrix<f64>,
    null_dim: usize,
    n_rows: usize,
    n_coef: usize,
}

impl SmootherContext {
    pub fn new(design: &DMatrix<f64>, penalty: &DMatrix<f64>) -> Result<Self> {
        let (n, j) = (design.nrows(), design.ncols());
        if penalty.nrows() != j || penalty.ncols() != j {
            return Err(Error::data("penalty dimension does not match design"));
        }
        let xtx = design.transpose() * design;
        let chol = cholesky_with_ridge(&xtx)?;
        let l = chol.l();
        // S = L^-1 P L^-t, via two triangular solves.
        let mut s = penalty.clone();
        l.solve_lower_triangular_mut(&mut s);
        s.transpose_mut();
        l.solve_lower_triangular_mut(&mut s);
        // Symmetrize round-off before the eigendecomposition.
        let s = 0.5 * (&s + s.transpose());
        let eig = SymmetricEigen::new(s);
        let mut order: Vec<usize> = (0..j).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let eigvals = DVector::from_fn(j, |k, _| eig.eigenvalues[order[k]].max(0.0));
        let v = DMatrix::from_fn(j, j, |r, k| eig.eigenvectors[(r, order[k])]);
        // W = V^t L^-1.
        let mut linv = DMatrix::identity(j, j);
        l.solve_lower_triangular_mut(&mut linv);
        let transform = v.transpose() * linv;
        let smax = eigvals[j - 1].max(0.0);
        let tol = smax * 1e-10 + 1e-300;
        let null_dim = eigvals.iter().filter(|&&e| e <= tol).count();
        Ok(SmootherContext {
            design: design.clone(),
            eigvals,
            transform,
            null_dim,
            n_rows: n,
            n_coef: j,
        })
    }

    pub fn null_dim(&self) -> usize {
        self.null_dim
    }

    fn project(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.transform * (self.design.transpose() * y)
    }

    fn edf_at(&self, lambda: f64) -> f64 {
        self.eigvals.iter().map(|&s| 1.0 / (1.0 + lambda * s)).sum()
    }

    /// Profiled REML criterion (up to constants), to be minimized in lambda.
    fn criterion(&self, z2: &DVector<f64>, sst: f64, n_curves: f64, lambda: f64) -> f64 {
        let mut q = sst;
        let mut logdet = 0.0;
        for (zj, &s) in z2.iter().zip(self.eigvals.iter()) {
            q -= zj / (1.0 + lambda * s);
            logdet += (1.0 + lambda * s).ln();
        }
        let q = q.max(1e-300);
        let n = self.n_rows as f64;
        let j = self.n_coef as f64;
        let m0 = self.null_dim as f64;
        n_curves * ((n - m0) * q.ln() - (j - m0) * lambda.ln() + logdet)
    }

    fn minimize(&self, z2: &DVector<f64>, sst: f64, n_curves: f64) -> Result<f64> {
        let (lo, hi) = LOG10_LAMBDA_RANGE;
        let step = (hi - lo) / (GRID_POINTS - 1) as f64;
        let mut best = (f64::INFINITY, lo);
        for k in 0..GRID_POINTS {
            let x = lo + step * k as f64;
            let c = self.criterion(z2, sst, n_curves, 10f64.powf(x));
            if !c.is_finite() {
                return Err(Error::numeric("non-finite REML criterion"));
            }
            if c < best.0 {
                best = (c, x);
            }
        }
        let mut a = (best.1 - step).max(lo);
        let mut b = (best.1 + step).min(hi);
        let invphi = 0.5 * (5f64.sqrt() - 1.0);
        let mut x1 = b - invphi * (b - a);
        let mut x2 = a + invphi * (b - a);
        let mut f1 = self.criterion(z2, sst, n_curves, 10f64.powf(x1));
        let mut f2 = self.criterion(z2, sst, n_curves, 10f64.powf(x2));
        while b - a > LOG10_LAMBDA_TOL {
            if f1 < f2 {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - invphi * (b - a);
                f1 = self.criterion(z2, sst, n_curves, 10f64.powf(x1));
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + invphi * (b - a);
                f2 = self.criterion(z2, sst, n_curves, 10f64.powf(x2));
            }
        }
        Ok(10f64.powf(0.5 * (a + b)))
    }

    /// REML-selected lambda for a single response curve.
    pub fn reml(&self, y: &DVector<f64>) -> Result<f64> {
        if y.len() != self.n_rows {
            return Err(Error::data("response length does not match design"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite value in smoother response"));
        }
        if self.n_rows <= self.n_coef {
            return Err(Error::data("REML requires more observations than coefficients"));
        }
        let z = self.project(y);
        let z2 = z.map(|v| v * v);
        self.minimize(&z2, y.dot(y), 1.0)
    }

    /// One shared lambda for many response curves (rows of `responses`),
    /// selected by REML on the stacked regression.
    pub fn reml_shared(&self, responses: &DMatrix<f64>) -> Result<f64> {
        if responses.ncols() != self.n_rows {
            return Err(Error::data("response row length does not match design"));
        }
        if self.n_rows <= self.n_coef {
            return Err(Error::data("REML requires more observations than coefficients"));
        }
        let n_curves = responses.nrows();
        if n_curves == 0 {
            return Err(Error::data("no response curves"));
        }
        let mut z2 = DVector::zeros(self.n_coef);
        let mut sst = 0.0;
        for i in 0..n_curves {
            let y = DVector::from_fn(self.n_rows, |t, _| responses[(i, t)]);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("non-finite value in smoother response"));
            }
            let z = self.project(&y);
            for k in 0..self.n_coef {
                z2[k] += z[k] * z[k];
            }
            sst += y.dot(&y);
        }
        self.minimize(&z2, sst, n_curves as f64)
    }

    /// Penalized solution at a given lambda, through the cached decomposition.
    pub fn fit_at(&self, y: &DVector<f64>, lambda: f64) -> PenalizedFit {
        let z = self.project(y);
        let shrunk = DVector::from_fn(self.n_coef, |k, _| z[k] / (1.0 + lambda * self.eigvals[k]));
        let coefficients = self.transform.transpose() * shrunk;
        let fitted = &self.design * &coefficients;
        PenalizedFit {
            coefficients,
            lambda,
            edf: self.edf_at(lambda),
            fitted,
        }
    }

    /// Coefficients for many response curves at one lambda; rows of the
    /// result align with rows of `responses`.
    pub fn solve_many(&self, responses: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
        // (W^t diag(1/(1+lambda s)) W) X^t applied to all rows at once.
        let xt_rt = self.design.transpose() * responses.transpose(); // J x N
        let z = &self.transform * xt_rt;
        let mut shrunk = z;
        for k in 0..self.n_coef {
            let f = 1.0 / (1.0 + lambda * self.eigvals[k]);
            for c in 0..shrunk.ncols() {
                shrunk[(k, c)] *= f;
            }
        }
        (self.transform.transpose() * shrunk).transpose()
    }
}

fn cholesky_with_ridge(m: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(c) = m.clone().cholesky() {
        return Ok(c);
    }
    let scale = m.diagonal().amax().max(1.0);
    let ridged = m + DMatrix::identity(m.nrows(), m.ncols()) * (1e-10 * scale);
    ridged
        .cholesky()
        .ok_or_else(|| Error::numeric("normal-equations matrix not positive definite"))
}

/// Minimize ||y - design c||^2 + lambda c^t P c.
///
/// With lambda = 0 this is ordinary least squares and requires a full-rank
/// design; a rank-deficient system is reported as an error. Positive lambdas
/// go through the spectral decomposition, which stays accurate up to the
/// infinite-penalty limit.
pub fn penalized_fit(
    y: &DVector<f64>,
    design: &DMatrix<f64>,
    penalty: &DMatrix<f64>,
    lambda: f64,
) -> Result<PenalizedFit> {
    if lambda < 0.0 {
        return Err(Error::config("negative smoothing parameter"));
    }
    if y.len() != design.nrows() {
        return Err(Error::data("response length does not match design"));
    }
    if lambda == 0.0 {
        let xtx = design.transpose() * design;
        let chol = xtx.clone().cholesky().ok_or_else(|| {
            Error::numeric("singular normal-equations matrix (rank-deficient design at lambda = 0)")
        })?;
        let diag = chol.l().diagonal();
        if diag.min() <= diag.max() * 1e-7 {
            return Err(Error::numeric(
                "singular normal-equations matrix (rank-deficient design at lambda = 0)",
            ));
        }
        let coefficients = chol.solve(&(design.transpose() * y));
        let fitted = design * &coefficients;
        let edf = chol.solve(&xtx).trace();
        return Ok(PenalizedFit {
            coefficients,
            lambda,
            edf,
            fitted,
        });
    }
    let ctx = SmootherContext::new(design, penalty)?;
    Ok(ctx.fit_at(y, lambda))
}

/// REML-selected smoothing parameter for a penalized regression, searched in
/// log10(lambda) over a fixed bracket: a coarse grid pre-scan followed by
/// golden-section refinement.
pub fn reml_lambda(
    y: &DVector<f64>,
    design: &DMatrix<f64>,
    penalty: &DMatrix<f64>,
) -> Result<f64> {
    let ctx = SmootherContext::new(design, penalty)?;
    ctx.reml(y)
}

/// Convenience composition: REML lambda selection followed by the penalized
/// fit on the basis' cached grid evaluation, returning fitted values.
pub fn smooth_curve(values: &[f64], grid: &[f64], basis: &BasisSystem) -> Result<Vec<f64>> {
    if values.len() != grid.len() {
        return Err(Error::data("values and grid length mismatch"));
    }
    if grid.len() != basis.grid().len()
        || grid
            .iter()
            .zip(basis.grid())
            .any(|(a, b)| (a - b).abs() > 1e-12)
    {
        return Err(Error::data("grid does not match the basis construction grid"));
    }
    let ctx = basis.smoother()?;
    let y = DVector::from_column_slice(values);
    let lambda = ctx.reml(&y)?;
    let fit = ctx.fit_at(&y, lambda);
    Ok(fit.fitted.as_slice().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::build_cyclic_basis;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn uniform_grid(n: usize) -> Vec<f64> {
        (0..n).map(|k| k as f64 / (n - 1) as f64).collect()
    }

    fn test_setup(t: usize, j: usize) -> (Vec<f64>, crate::basis::BasisSystem) {
        let grid = uniform_grid(t);
        let basis = build_cyclic_basis(3, (0.0, 1.0), j, &grid).unwrap();
        (grid, basis)
    }

    #[test]
    fn zero_lambda_is_ols() {
        let (_, basis) = test_setup(30, 6);
        let design = basis.eval_matrix().clone();
        let p = basis.penalty_matrix().unwrap().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = DVector::from_fn(30, |_, _| rng.gen_range(-1.0..1.0));
        let fit = penalized_fit(&y, &design, &p, 0.0).unwrap();
        // Independent OLS via QR.
        let qr = design.clone().qr();
        let ols = qr.solve(&y).unwrap();
        assert!((&fit.coefficients - &ols).amax() < 1e-9);
        assert!((fit.edf - 6.0).abs() < 1e-8);
    }

    #[test]
    fn huge_lambda_fits_the_mean() {
        let (_, basis) = test_setup(40, 8);
        let design = basis.eval_matrix().clone();
        let p = basis.penalty_matrix().unwrap().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = DVector::from_fn(40, |_, _| rng.gen_range(0.0..3.0));
        let fit = penalized_fit(&y, &design, &p, 1e12).unwrap();
        let mean = y.mean();
        for t in 0..40 {
            assert!((fit.fitted[t] - mean).abs() < 1e-6, "t={t}");
        }
    }

    #[test]
    fn edf_matches_dense_hat_trace() {
        let (_, basis) = test_setup(35, 7);
        let design = basis.eval_matrix().clone();
        let p = basis.penalty_matrix().unwrap().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = DVector::from_fn(35, |_, _| rng.gen_range(-1.0..1.0));
        for &lambda in &[1e-4, 0.3, 10.0, 1e5] {
            let fit = penalized_fit(&y, &design, &p, lambda).unwrap();
            // Oracle: explicit dense hat matrix trace.
            let h = design.transpose() * &design + &p * lambda;
            let hinv = h.try_inverse().unwrap();
            let hat = &design * hinv * design.transpose();
            assert!(
                (fit.edf - hat.trace()).abs() < 1e-6,
                "lambda={lambda}: {} vs {}",
                fit.edf,
                hat.trace()
            );
        }
        // edf nonincreasing in lambda, bounded by [null dim, J].
        let edfs: Vec<f64> = [0.0, 1e-3, 1.0, 1e3, 1e9]
            .iter()
            .map(|&l| penalized_fit(&y, &design, &p, l).unwrap().edf)
            .collect();
        for w in edfs.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
        assert!(edfs[0] <= 7.0 + 1e-9 && *edfs.last().unwrap() >= 1.0 - 1e-9);
    }

    #[test]
    fn reml_is_scale_equivariant() {
        let (_, basis) = test_setup(60, 10);
        let design = basis.eval_matrix().clone();
        let p = basis.penalty_matrix().unwrap().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = DVector::from_fn(60, |t, _| {
            (2.0 * std::f64::consts::PI * t as f64 / 59.0).sin() + 0.3 * rng.gen_range(-1.0..1.0)
        });
        let l1 = reml_lambda(&y, &design, &p).unwrap();
        let l2 = reml_lambda(&(&y * 37.5), &design, &p).unwrap();
        assert!(
            (l1.log10() - l2.log10()).abs() < 2e-4,
            "{} vs {}",
            l1.log10(),
            l2.log10()
        );
    }

    #[test]
    fn reml_agrees_with_grid_search_oracle() {
        let (_, basis) = test_setup(50, 9);
        let design = basis.eval_matrix().clone();
        let p = basis.penalty_matrix().unwrap().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..4 {
            let noise = 0.05 + 0.4 * trial as f64;
            let y = DVector::from_fn(50, |t, _| {
                let s = t as f64 / 49.0;
                (2.0 * std::f64::consts::PI * s).cos()
                    + noise * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            });
            let lam = reml_lambda(&y, &design, &p).unwrap();
            // Oracle: dense criterion on a 0.01 grid, computed from scratch.
            let mut best = (f64::INFINITY, f64::NAN);
            let mut x = -8.0;
            while x <= 12.0 + 1e-9 {
                let c = dense_reml_criterion(&y, &design, &p, 10f64.powf(x));
                if c < best.0 {
                    best = (c, x);
                }
                x += 0.01;
            }
            assert!(
                (lam.log10() - best.1).abs() <= 0.02,
                "trial {trial}: {} vs oracle {}",
                lam.log10(),
                best.1
            );
        }
    }

    /// Brute-force REML criterion: explicit solve, determinant, and residuals.
    fn dense_reml_criterion(
        y: &DVector<f64>,
        design: &DMatrix<f64>,
        p: &DMatrix<f64>,
        lambda: f64,
    ) -> f64 {
        let n = design.nrows() as f64;
        let j = design.ncols() as f64;
        let eig = SymmetricEigen::new(p.clone());
        let pmax = eig.eigenvalues.max();
        let m0 = eig.eigenvalues.iter().filter(|&&e| e <= pmax * 1e-10).count() as f64;
        let h = design.transpose() * design + p * lambda;
        let chol = h.clone().cholesky().unwrap();
        let c = chol.solve(&(design.transpose() * y));
        let resid = y - design * &c;
        let q = resid.dot(&resid) + lambda * (c.transpose() * p * &c)[(0, 0)];
        let logdet = 2.0 * chol.l().diagonal().map(|v| v.ln()).sum();
        (n - m0) * q.max(1e-300).ln() - (j - m0) * lambda.ln() + logdet
    }

    #[test]
    fn white_noise_is_smoothed_to_near_constant() {
        let (_, basis) = test_setup(50, 10);
        let ctx = basis.smoother().unwrap();
        let mut hits = 0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let y = DVector::from_fn(50, |_, _| {
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            });
            let lam = ctx.reml(&y).unwrap();
            let edf = ctx.fit_at(&y, lam).edf;
            if edf <= 2.0 + ctx.null_dim() as f64 {
                hits += 1;
            }
        }
        assert!(hits >= 90, "only {hits}/100 white-noise fits were near-constant");
    }

    #[test]
    fn smooth_curve_keeps_functions_in_span() {
        let grid = uniform_grid(48);
        let basis = build_cyclic_basis(3, (0.0, 1.0), 6, &grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let coef = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
        let y = basis.eval_matrix() * &coef;
        let out = smooth_curve(y.as_slice(), &grid, &basis).unwrap();
        // Compare against the unpenalized projection (identical to y here).
        for t in 0..48 {
            assert!((out[t] - y[t]).abs() < 1e-4, "t={t}: {} vs {}", out[t], y[t]);
        }
        // Idempotence on span.
        let again = smooth_curve(&out, &grid, &basis).unwrap();
        let drift = out
            .iter()
            .zip(&again)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(drift < 1e-3, "re-smoothing drift {drift}");
    }

    #[test]
    fn smooth_curve_constant_and_periodic() {
        let grid = uniform_grid(40);
        let basis = build_cyclic_basis(3, (0.0, 1.0), 8, &grid).unwrap();
        let constant = vec![2.5; 40];
        let out = smooth_curve(&constant, &grid, &basis).unwrap();
        for v in &out {
            assert!((v - 2.5).abs() < 1e-8);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let wavy: Vec<f64> = grid
            .iter()
            .map(|s| {
                (2.0 * std::f64::consts::PI * s).sin()
                    + 0.2 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            })
            .collect();
        let out = smooth_curve(&wavy, &grid, &basis).unwrap();
        // Grid endpoints 0 and 1 are the same point of the circle.
        assert!((out[0] - out[39]).abs() < 1e-6);
    }

    #[test]
    fn rss_is_nondecreasing_in_lambda() {
        let (_, basis) = test_setup(45, 9);
        let design = basis.eval_matrix().clone();
        let p = basis.penalty_matrix().unwrap().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y = DVector::from_fn(45, |_, _| rng.gen_range(-1.0..1.0));
        let mut prev = -1.0;
        for &lambda in &[0.0, 1e-6, 1e-3, 1.0, 1e3, 1e6, 1e10] {
            let fit = penalized_fit(&y, &design, &p, lambda).unwrap();
            let rss = (&y - &fit.fitted).norm_squared();
            assert!(rss >= prev - 1e-9, "RSS decreased at lambda={lambda}");
            prev = rss;
        }
    }

    #[test]
    fn rejects_rank_deficient_ols() {
        let design = DMatrix::from_fn(10, 3, |r, c| if c == 2 { 0.0 } else { (r * (c + 1)) as f64 });
        let p = DMatrix::zeros(3, 3);
        let y = DVector::from_element(10, 1.0);
        assert!(penalized_fit(&y, &design, &p, 0.0).is_err());
    }
}
