//! Periodic (cyclic) B-spline bases on a closed functional domain, with the
//! curvature penalty matrix used by the penalized smoother.
//!
//! The basis is built from ordinary B-splines on a knot lattice that wraps
//! around the domain; the last `degree` coefficients are identified with the
//! first ones, so the basis dimension equals the number of distinct knots.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::dist::gauss_legendre;
use crate::error::{Error, Result};
use crate::smooth::SmootherContext;

/// A cyclic B-spline basis with a cached evaluation matrix on a grid and the
/// second-derivative penalty matrix. Immutable after construction; safe to
/// share across threads.
#[derive(Debug)]
pub struct BasisSystem {
    degree: usize,
    boundary: (f64, f64),
    knots: Vec<f64>,
    extended: Vec<f64>,
    grid: Vec<f64>,
    eval: DMatrix<f64>,
    penalty: Option<DMatrix<f64>>,
    smoother: OnceLock<SmootherContext>,
}

/// Cyclic basis with `n_knots` equidistant knots on `boundary`, evaluated on
/// `grid`. The basis dimension J equals `n_knots`.
pub fn build_cyclic_basis(
    degree: usize,
    boundary: (f64, f64),
    n_knots: usize,
    grid: &[f64],
) -> Result<BasisSystem> {
    if degree < 1 {
        return Err(Error::config("basis degree must be at least 1"));
    }
    if n_knots < degree + 1 {
        return Err(Error::config(format!(
            "cyclic basis of degree {degree} needs at least {} knots, got {n_knots}",
            degree + 1
        )));
    }
    let (lo, hi) = boundary;
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::config(format!("invalid boundary [{lo}, {hi}]")));
    }
    let period = hi - lo;
    let knots: Vec<f64> = (0..n_knots)
        .map(|i| lo + period * i as f64 / n_knots as f64)
        .collect();
    BasisSystem::from_knots(degree, boundary, knots, grid)
}

impl BasisSystem {
    /// Cyclic basis on explicit distinct knots in `[lo, hi)`; the upper
    /// boundary is identified with the lower one.
    pub fn from_knots(
        degree: usize,
        boundary: (f64, f64),
        knots: Vec<f64>,
        grid: &[f64],
    ) -> Result<Self> {
        let (lo, hi) = boundary;
        let m = knots.len();
        if m < degree + 1 {
            return Err(Error::config("too few knots for the requested degree"));
        }
        if knots[0] != lo {
            return Err(Error::config("first knot must sit on the lower boundary"));
        }
        if knots.windows(2).any(|w| w[1] <= w[0]) || *knots.last().unwrap() >= hi {
            return Err(Error::config("knots must be strictly increasing inside the domain"));
        }
        let period = hi - lo;
        // Wrapped knot lattice: tau_k for k in [-degree, m + degree].
        let mut extended = Vec::with_capacity(m + 2 * degree + 1);
        for k in -(degree as isize)..=(m + degree) as isize {
            let idx = k.rem_euclid(m as isize) as usize;
            let shift = ((k - idx as isize) / m as isize) as f64;
            extended.push(knots[idx] + shift * period);
        }

        let mut basis = BasisSystem {
            degree,
            boundary,
            knots,
            extended,
            grid: Vec::new(),
            eval: DMatrix::zeros(0, 0),
            penalty: None,
            smoother: OnceLock::new(),
        };
        basis.penalty = if degree >= 2 {
            Some(basis.compute_penalty())
        } else {
            None
        };
        basis.set_grid(grid)?;
        Ok(basis)
    }

    fn set_grid(&mut self, grid: &[f64]) -> Result<()> {
        let (lo, hi) = self.boundary;
        let j = self.dim();
        let mut eval = DMatrix::zeros(grid.len(), j);
        for (t, &s) in grid.iter().enumerate() {
            if s < lo || s > hi {
                return Err(Error::data(format!(
                    "grid point {s} outside boundary [{lo}, {hi}]"
                )));
            }
            let row = self.eval_at(s)?;
            for k in 0..j {
                eval[(t, k)] = row[k];
            }
        }
        self.grid = grid.to_vec();
        self.eval = eval;
        Ok(())
    }

    /// Basis dimension J (number of distinct knots).
    pub fn dim(&self) -> usize {
        self.knots.len()
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn boundary(&self) -> (f64, f64) {
        self.boundary
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Cached T x J evaluation matrix on the construction grid.
    pub fn eval_matrix(&self) -> &DMatrix<f64> {
        &self.eval
    }

    /// J x J curvature penalty P with P[j,k] = integral of phi_j'' phi_k''.
    pub fn penalty_matrix(&self) -> Result<&DMatrix<f64>> {
        self.penalty
            .as_ref()
            .ok_or_else(|| Error::config("penalty matrix requires basis degree >= 2"))
    }

    /// All J basis values at a point of the domain.
    pub fn eval_at(&self, s: f64) -> Result<DVector<f64>> {
        self.eval_derivative(s, 0)
    }

    /// All J values of the d-th derivative at a point of the domain.
    pub fn eval_derivative(&self, s: f64, order: usize) -> Result<DVector<f64>> {
        let (lo, hi) = self.boundary;
        if s < lo || s > hi {
            return Err(Error::data(format!(
                "evaluation point {s} outside boundary [{lo}, {hi}]"
            )));
        }
        let open = open_bspline_derivatives(&self.extended, self.degree, s, order);
        Ok(self.fold(&open))
    }

    /// Fold the open-basis values onto the J cyclic functions: coefficient
    /// l >= J is identified with l - J.
    fn fold(&self, open: &[f64]) -> DVector<f64> {
        let j = self.dim();
        let mut out = DVector::zeros(j);
        for (l, &v) in open.iter().enumerate() {
            out[l % j] += v;
        }
        out
    }

    fn compute_penalty(&self) -> DMatrix<f64> {
        let j = self.dim();
        let (lo, hi) = self.boundary;
        let mut spans: Vec<f64> = self.knots.clone();
        spans.push(hi);
        // phi'' is a piecewise polynomial of degree (degree - 2) per span, so
        // the products have degree 2*(degree - 2); degree + 1 Gauss points per
        // span integrate them exactly.
        let (nodes, weights) = gauss_legendre(self.degree + 1);
        let mut p = DMatrix::zeros(j, j);
        for w in spans.windows(2) {
            let (a, b) = (w[0], w[1]);
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (x, wq) in nodes.iter().zip(&weights) {
                let s = (mid + half * x).clamp(lo, hi);
                let d2 = self.fold(&open_bspline_derivatives(&self.extended, self.degree, s, 2));
                let scale = wq * half;
                for r in 0..j {
                    if d2[r] == 0.0 {
                        continue;
                    }
                    for c in 0..j {
                        p[(r, c)] += scale * d2[r] * d2[c];
                    }
                }
            }
        }
        // Symmetrize away quadrature round-off.
        for r in 0..j {
            for c in (r + 1)..j {
                let v = 0.5 * (p[(r, c)] + p[(c, r)]);
                p[(r, c)] = v;
                p[(c, r)] = v;
            }
        }
        p
    }

    /// Shared REML smoother machinery for this basis on its grid, built once.
    pub(crate) fn smoother(&self) -> Result<&SmootherContext> {
        if let Some(ctx) = self.smoother.get() {
            return Ok(ctx);
        }
        let ctx = SmootherContext::new(&self.eval, self.penalty_matrix()?)?;
        let _ = self.smoother.set(ctx);
        Ok(self.smoother.get().unwrap())
    }
}

/// Values of the d-th derivative of every open B-spline of the given degree
/// at `s`, on the extended knot vector. Returns `ext.len() - degree - 1`
/// values (the degree-q spline count for each recursion level is maintained
/// internally).
fn open_bspline_derivatives(ext: &[f64], degree: usize, s: f64, order: usize) -> Vec<f64> {
    let n0 = ext.len() - 1;
    if order > degree {
        return vec![0.0; ext.len() - degree - 1];
    }
    // Degree-0 indicators with the last admissible span closed on the right.
    let mut vals = vec![0.0; n0];
    let mut span = n0 - 1;
    while span > 0 && s < ext[span] {
        span -= 1;
    }
    while span + 1 < n0 && s >= ext[span + 1] {
        span += 1;
    }
    vals[span] = 1.0;

    // Raise degree up to (degree - order) by the Cox-de Boor recurrence.
    for q in 1..=(degree - order) {
        let mut next = vec![0.0; n0 - q];
        for l in 0..(n0 - q) {
            let mut v = 0.0;
            let d1 = ext[l + q] - ext[l];
            if d1 > 0.0 {
                v += (s - ext[l]) / d1 * vals[l];
            }
            let d2 = ext[l + q + 1] - ext[l + 1];
            if d2 > 0.0 {
                v += (ext[l + q + 1] - s) / d2 * vals[l + 1];
            }
            next[l] = v;
        }
        vals = next;
    }
    // Differentiate the remaining `order` levels.
    for q in (degree - order + 1)..=degree {
        let mut next = vec![0.0; n0 - q];
        for l in 0..(n0 - q) {
            let mut v = 0.0;
            let d1 = ext[l + q] - ext[l];
            if d1 > 0.0 {
                v += vals[l] / d1;
            }
            let d2 = ext[l + q + 1] - ext[l + 1];
            if d2 > 0.0 {
                v -= vals[l + 1] / d2;
            }
            next[l] = q as f64 * v;
        }
        vals = next;
    }
    vals
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn uniform_grid(n: usize) -> Vec<f64> {
        (1..=n).map(|k| k as f64 / n as f64).collect()
    }

    #[test]
    fn basis_dimension_matches_knot_count() {
        let b = build_cyclic_basis(3, (0.0, 1.0), 5, &uniform_grid(40)).unwrap();
        assert_eq!(b.dim(), 5);
        let g: Vec<f64> = (1..=96).map(|k| 24.0 * k as f64 / 96.0).collect();
        let b24 = build_cyclic_basis(3, (0.0, 24.0), 24, &g).unwrap();
        assert_eq!(b24.dim(), 24);
    }

    #[test]
    fn partition_of_unity() {
        let b = build_cyclic_basis(3, (0.0, 1.0), 7, &uniform_grid(30)).unwrap();
        let mut rng = rand::thread_rng();
        for _ in 0..200 {
            let s: f64 = rng.gen();
            let v = b.eval_at(s).unwrap();
            assert!((v.sum() - 1.0).abs() < 1e-10, "sum at {s} = {}", v.sum());
        }
        // Boundary points included.
        for s in [0.0, 1.0] {
            assert!((b.eval_at(s).unwrap().sum() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn periodic_values_and_derivatives_at_boundary() {
        let b = build_cyclic_basis(3, (0.0, 1.0), 6, &uniform_grid(12)).unwrap();
        for order in 0..=2 {
            let at_lo = b.eval_derivative(0.0, order).unwrap();
            let at_hi = b.eval_derivative(1.0, order).unwrap();
            for j in 0..b.dim() {
                assert!(
                    (at_lo[j] - at_hi[j]).abs() < 1e-10,
                    "order {order} basis {j}: {} vs {}",
                    at_lo[j],
                    at_hi[j]
                );
            }
        }
    }

    #[test]
    fn penalty_is_symmetric_psd_and_kills_constants() {
        let b = build_cyclic_basis(3, (0.0, 1.0), 8, &uniform_grid(20)).unwrap();
        let p = b.penalty_matrix().unwrap();
        assert_eq!(p.nrows(), 8);
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(p[(r, c)], p[(c, r)]);
            }
        }
        let ones = DVector::from_element(8, 1.0);
        let quad = (ones.transpose() * p * &ones)[(0, 0)];
        assert!(quad.abs() < 1e-10, "constant curvature {quad}");
        let eig = nalgebra::SymmetricEigen::new(p.clone());
        let min = eig.eigenvalues.min();
        assert!(min >= -1e-8, "min eigenvalue {min}");
    }

    #[test]
    fn penalty_matches_dense_simpson_quadrature() {
        // Independent oracle: composite Simpson on a fine per-span grid.
        let b = build_cyclic_basis(3, (0.0, 1.0), 5, &uniform_grid(25)).unwrap();
        let p = b.penalty_matrix().unwrap();
        let j = b.dim();
        let mut spans: Vec<f64> = b.knots().to_vec();
        spans.push(1.0);
        let mut oracle = DMatrix::<f64>::zeros(j, j);
        for w in spans.windows(2) {
            let (a, bb) = (w[0], w[1]);
            let m = 400usize; // even panel count per span
            let h = (bb - a) / m as f64;
            for i in 0..=m {
                let s = a + h * i as f64;
                let d2 = b.eval_derivative(s.min(1.0), 2).unwrap();
                let coef = if i == 0 || i == m {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                for r in 0..j {
                    for c in 0..j {
                        oracle[(r, c)] += coef * h / 3.0 * d2[r] * d2[c];
                    }
                }
            }
        }
        for r in 0..j {
            for c in 0..j {
                assert!(
                    (p[(r, c)] - oracle[(r, c)]).abs() < 1e-8,
                    "entry ({r},{c}): {} vs {}",
                    p[(r, c)],
                    oracle[(r, c)]
                );
            }
        }
    }

    #[test]
    fn equidistant_penalty_has_constant_diagonal() {
        let b = build_cyclic_basis(3, (0.0, 1.0), 9, &uniform_grid(18)).unwrap();
        let p = b.penalty_matrix().unwrap();
        let d0 = p[(0, 0)];
        for j in 1..9 {
            assert!((p[(j, j)] - d0).abs() < 1e-8 * d0.abs().max(1.0));
        }
    }

    #[test]
    fn reproduces_functions_in_span() {
        let grid = uniform_grid(40);
        let b = build_cyclic_basis(3, (0.0, 1.0), 6, &grid).unwrap();
        let mut rng = rand::thread_rng();
        let coef = DVector::from_fn(6, |_, _| rng.gen_range(-2.0..2.0));
        let y = b.eval_matrix() * &coef;
        let design = b.eval_matrix();
        let sol = (design.transpose() * design)
            .cholesky()
            .unwrap()
            .solve(&(design.transpose() * &y));
        let err = (&sol - &coef).amax();
        assert!(err < 1e-9, "coefficient recovery error {err}");
    }

    #[test]
    fn rejects_bad_configurations() {
        assert!(build_cyclic_basis(3, (0.0, 1.0), 3, &uniform_grid(10)).is_err());
        assert!(build_cyclic_basis(3, (0.0, 1.0), 5, &[0.5, 1.2]).is_err());
        assert!(build_cyclic_basis(0, (0.0, 1.0), 5, &uniform_grid(10)).is_err());
    }
}
