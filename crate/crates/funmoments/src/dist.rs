//! Distribution helpers: normal cdf/quantile, gamma quantile, and
//! Gauss-Legendre / Gauss-Hermite quadrature rules.

use nalgebra::{DMatrix, SymmetricEigen};
use statrs::function::erf;
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{Error, Result};

/// Standard normal cumulative distribution function.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal quantile function.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::numeric(format!("normal quantile of p={p}")));
    }
    use statrs::distribution::ContinuousCDF;
    let n = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
    Ok(n.inverse_cdf(p))
}

/// Quantile of the Gamma(shape, scale = 1) distribution.
///
/// Newton iteration on the regularized incomplete gamma function, started
/// from the Wilson-Hilferty approximation and safeguarded by bisection.
pub fn gamma_quantile(p: f64, shape: f64) -> Result<f64> {
    if !(shape > 0.0) {
        return Err(Error::numeric(format!("gamma quantile with shape {shape}")));
    }
    if p <= 0.0 {
        return Ok(0.0);
    }
    if p >= 1.0 {
        return Err(Error::numeric("gamma quantile of p >= 1".to_string()));
    }

    // Wilson-Hilferty start; fall back to the small-x power expansion when
    // the cube is nonpositive or p is far in the lower tail.
    let z = normal_quantile(p)?;
    let c = 1.0 - 1.0 / (9.0 * shape) + z / (3.0 * shape.sqrt());
    let mut x = if c > 0.0 { shape * c * c * c } else { 0.0 };
    if x <= 0.0 || p < 1e-8 {
        // F(x) ~ x^shape / (shape * Gamma(shape)) for small x.
        x = ((p.ln() + ln_gamma(shape + 1.0)) / shape).exp();
    }
    if !x.is_finite() || x <= 0.0 {
        x = shape;
    }

    let mut lo = 0.0_f64;
    let mut hi = f64::INFINITY;
    for _ in 0..200 {
        let f = gamma_lr(shape, x) - p;
        if f > 0.0 {
            hi = hi.min(x);
        } else {
            lo = lo.max(x);
        }
        let log_pdf = (shape - 1.0) * x.ln() - x - ln_gamma(shape);
        let pdf = log_pdf.exp();
        let mut next = if pdf > 0.0 { x - f / pdf } else { x };
        if !(next > lo && next < hi) || !next.is_finite() {
            next = if hi.is_finite() {
                0.5 * (lo + hi)
            } else {
                (x * 2.0).max(lo + 1.0)
            };
        }
        if (next - x).abs() <= 1e-14 * x.abs() + 1e-300 {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

/// Nodes and weights of an n-point quadrature rule computed from the
/// symmetric tridiagonal Jacobi matrix (Golub-Welsch).
fn golub_welsch(diag: &[f64], offdiag: &[f64], weight_total: f64) -> (Vec<f64>, Vec<f64>) {
    let n = diag.len();
    let mut j = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        j[(i, i)] = diag[i];
        if i + 1 < n {
            j[(i, i + 1)] = offdiag[i];
            j[(i + 1, i)] = offdiag[i];
        }
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], weight_total * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// n-point Gauss-Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let diag = vec![0.0; n];
    let offdiag: Vec<f64> = (1..n)
        .map(|i| {
            let i = i as f64;
            i / (4.0 * i * i - 1.0).sqrt()
        })
        .collect();
    golub_welsch(&diag, &offdiag, 2.0)
}

/// n-point Gauss-Hermite rule for expectations against the standard normal
/// density: E[f(Z)] ~ sum_i w_i f(x_i).
pub fn gauss_hermite_normal(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    // Probabilists' Hermite recurrence: b_i = sqrt(i).
    let diag = vec![0.0; n];
    let offdiag: Vec<f64> = (1..n).map(|i| (i as f64).sqrt()).collect();
    golub_welsch(&diag, &offdiag, 1.0)
}
