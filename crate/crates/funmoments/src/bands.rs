//! Subject-level nonparametric bootstrap of the full pipeline and the three
//! confidence-band constructions: Wald, symmetric CMA, and asymmetric CMA.
//!
//! Band quantile conventions. Standardized deviations are
//! Z*_b(s) = (g*_b(s) - gbar(s)) / d(s)^{1/2} with d the bootstrap variance
//! about the ensemble mean. The asymmetric band uses the (1 - alpha/2)
//! empirical quantile of the per-replicate maxima and the (alpha/2) quantile
//! of the minima, applied in the sign-consistent form
//! [g - q_hi d^{1/2}, g - q_lo d^{1/2}]. The symmetric band draws one
//! (1 - alpha/2) quantile from the maxima pooled with the negated minima, so
//! that a mirror-symmetric ensemble yields exactly q_hi = -q_lo and the two
//! band kinds coincide. Lower-tail quantiles are computed by negation
//! (the upper type-1 quantile of the negated sample), which preserves that
//! identity exactly. All empirical quantiles follow the inverse-CDF (type-1)
//! rule sorted[ceil(n p) - 1].

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::basis::BasisSystem;
use crate::dataset::FunctionalDataset;
use crate::dist::normal_quantile;
use crate::error::{Error, Result};
use crate::fosr::design_pinv;
use crate::pipeline::{fit_with_basis, FitSettings, PipelineFit};
use crate::seed;
use crate::surface::CurveKind;

const BOOT_TAG: u64 = 0x626f_6f74;
const MAX_RESAMPLE_ATTEMPTS: u64 = 10;

/// A functional target whose sampling distribution the bootstrap tracks.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetSpec {
    /// Smoothed coefficient function of covariate p.
    FixedEffect(usize),
    NoiseVariance,
    ConditionalMean(Vec<f64>),
    ConditionalVariance(Vec<f64>),
    ConditionalSkewness(Vec<f64>),
    ConditionalKurtosis(Vec<f64>),
    /// Lag correlation curve at a covariate vector, lag in grid steps.
    LagCorrelation(Vec<f64>, usize),
    VarianceRatio(Vec<f64>, Vec<f64>),
}

impl TargetSpec {
    pub fn needs_third(&self) -> bool {
        matches!(self, TargetSpec::ConditionalSkewness(_))
    }

    pub fn needs_fourth(&self) -> bool {
        matches!(self, TargetSpec::ConditionalKurtosis(_))
    }

    /// Short key used in output files.
    pub fn label(&self) -> String {
        fn probe(x: &[f64]) -> String {
            x.iter()
                .map(|v| format!("{v}"))
                .collect::<Vec<_>>()
                .join("_")
        }
        match self {
            TargetSpec::FixedEffect(p) => format!("beta{p}"),
            TargetSpec::NoiseVariance => "noise_variance".to_string(),
            TargetSpec::ConditionalMean(x) => format!("mean@{}", probe(x)),
            TargetSpec::ConditionalVariance(x) => format!("variance@{}", probe(x)),
            TargetSpec::ConditionalSkewness(x) => format!("skewness@{}", probe(x)),
            TargetSpec::ConditionalKurtosis(x) => format!("kurtosis@{}", probe(x)),
            TargetSpec::LagCorrelation(x, lag) => format!("lagcorr{lag}@{}", probe(x)),
            TargetSpec::VarianceRatio(x1, x2) => {
                format!("variance_ratio@{}|{}", probe(x1), probe(x2))
            }
        }
    }
}

/// Evaluate a target curve on a fitted pipeline.
pub fn evaluate_target(fit: &PipelineFit, target: &TargetSpec) -> Result<Vec<f64>> {
    let model = &fit.model;
    match target {
        TargetSpec::FixedEffect(p) => {
            if *p >= fit.fosr.beta_smooth.nrows() {
                return Err(Error::config(format!("no fixed effect {p}")));
            }
            Ok(fit.fosr.beta_smooth.row(*p).iter().copied().collect())
        }
        TargetSpec::NoiseVariance => Ok(fit.scores.sigma2_eps.iter().copied().collect()),
        TargetSpec::ConditionalMean(x) => model.mean_curve(x),
        TargetSpec::ConditionalVariance(x) => model.variance_curve(x),
        TargetSpec::ConditionalSkewness(x) => model.skewness_curve(x),
        TargetSpec::ConditionalKurtosis(x) => model.excess_kurtosis_curve(x),
        TargetSpec::LagCorrelation(x, lag) => model.lag_correlation_curve(x, *lag),
        TargetSpec::VarianceRatio(x1, x2) => model.variance_ratio_curve(x1, x2),
    }
}

/// Map a target list onto a [`CurveKind`] where one exists (used by the CLI).
pub fn curve_kind_of(target: &TargetSpec) -> Option<(Vec<f64>, CurveKind)> {
    match target {
        TargetSpec::ConditionalMean(x) => Some((x.clone(), CurveKind::Mean)),
        TargetSpec::ConditionalVariance(x) => Some((x.clone(), CurveKind::Variance)),
        TargetSpec::ConditionalSkewness(x) => Some((x.clone(), CurveKind::Skewness)),
        TargetSpec::ConditionalKurtosis(x) => Some((x.clone(), CurveKind::ExcessKurtosis)),
        TargetSpec::LagCorrelation(x, lag) => {
            Some((x.clone(), CurveKind::CorrelationLag(*lag)))
        }
        TargetSpec::VarianceRatio(x1, x2) => {
            Some((x1.clone(), CurveKind::VarianceRatio(x2.clone())))
        }
        _ => None,
    }
}

/// Bootstrap ensemble of one target curve.
#[derive(Debug, Clone)]
pub struct BootstrapEnsemble {
    pub target: TargetSpec,
    /// B x T matrix of refitted curves.
    pub samples: DMatrix<f64>,
    /// Ensemble mean curve.
    pub mean: Vec<f64>,
    /// Pointwise bootstrap standard deviation about the ensemble mean
    /// (denominator B).
    pub sd: Vec<f64>,
    pub seed: u64,
}

/// Band type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandKind {
    Wald,
    CmaSymmetric,
    CmaAsymmetric,
}

/// Point estimate with lower/upper envelopes.
#[derive(Debug, Clone)]
pub struct BandResult {
    pub estimate: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub kind: BandKind,
    pub alpha: f64,
    pub q_lo: f64,
    pub q_hi: f64,
    /// Locations where the bootstrap SD was zero and the band collapsed to
    /// the estimate.
    pub collapsed: Vec<bool>,
}

impl BandResult {
    /// True when the curve lies inside the band at every location.
    pub fn covers_everywhere(&self, truth: &[f64]) -> bool {
        truth
            .iter()
            .enumerate()
            .all(|(t, &v)| self.lower[t] <= v && v <= self.upper[t])
    }

    /// Fraction of locations where the curve lies inside the band.
    pub fn pointwise_coverage(&self, truth: &[f64]) -> f64 {
        let hits = truth
            .iter()
            .enumerate()
            .filter(|(t, &v)| self.lower[*t] <= v && v <= self.upper[*t])
            .count();
        hits as f64 / truth.len() as f64
    }
}

/// Type-1 (inverse-CDF) empirical quantile of an ascending-sorted sample.
pub fn empirical_quantile_type1(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    assert!((0.0..=1.0).contains(&p));
    let n = sorted.len();
    let k = ((n as f64) * p).ceil() as usize;
    sorted[k.clamp(1, n) - 1]
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

/// Rerun the full pipeline on subject resamples and collect every target
/// curve. Replicate b draws its resample from an independent substream of
/// (seed, b); a rank-deficient resampled design is redrawn with the next
/// substream, up to 10 attempts.
pub fn bootstrap_pipeline(
    data: &FunctionalDataset,
    basis: &std::sync::Arc<BasisSystem>,
    settings: &FitSettings,
    targets: &[TargetSpec],
    b_count: usize,
    master_seed: u64,
) -> Result<Vec<BootstrapEnsemble>> {
    if b_count < 2 {
        return Err(Error::config("bootstrap needs at least 2 replicates"));
    }
    let n = data.n_subjects();
    let t = data.n_points();
    let replicate_curves: Vec<Result<Vec<Vec<f64>>>> = (0..b_count)
        .into_par_iter()
        .map(|b| bootstrap_replicate(data, basis, settings, targets, master_seed, b as u64, n))
        .collect();

    let mut per_target: Vec<DMatrix<f64>> =
        targets.iter().map(|_| DMatrix::zeros(b_count, t)).collect();
    for (b, rep) in replicate_curves.into_iter().enumerate() {
        let curves = rep?;
        for (k, curve) in curves.into_iter().enumerate() {
            for (s, v) in curve.into_iter().enumerate() {
                per_target[k][(b, s)] = v;
            }
        }
    }

    Ok(per_target
        .into_iter()
        .zip(targets.iter())
        .map(|(samples, target)| {
            let mean: Vec<f64> = (0..t).map(|s| samples.column(s).mean()).collect();
            let sd: Vec<f64> = (0..t)
                .map(|s| {
                    let d = samples
                        .column(s)
                        .iter()
                        .map(|v| (v - mean[s]) * (v - mean[s]))
                        .sum::<f64>()
                        / b_count as f64;
                    d.sqrt()
                })
                .collect();
            BootstrapEnsemble {
                target: target.clone(),
                samples,
                mean,
                sd,
                seed: master_seed,
            }
        })
        .collect())
}

fn bootstrap_replicate(
    data: &FunctionalDataset,
    basis: &std::sync::Arc<BasisSystem>,
    settings: &FitSettings,
    targets: &[TargetSpec],
    master_seed: u64,
    b: u64,
    n: usize,
) -> Result<Vec<Vec<f64>>> {
    for attempt in 0..MAX_RESAMPLE_ATTEMPTS {
        let mut rng = seed::stream(master_seed, &[BOOT_TAG, b, attempt]);
        let indices: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
        let resampled = data.resample(&indices);
        if design_pinv(&resampled.x).is_err() {
            continue;
        }
        let fit = fit_with_basis(&resampled, basis, settings)?;
        return targets.iter().map(|t| evaluate_target(&fit, t)).collect();
    }
    Err(Error::numeric(format!(
        "bootstrap replicate {b}: rank-deficient resample after {MAX_RESAMPLE_ATTEMPTS} attempts"
    )))
}

/// Wald band estimate +/- z_{1-alpha/2} d^{1/2}.
pub fn wald_band(ensemble: &BootstrapEnsemble, estimate: &[f64], alpha: f64) -> Result<BandResult> {
    check_alpha(alpha)?;
    if estimate.len() != ensemble.sd.len() {
        return Err(Error::data("estimate length does not match ensemble"));
    }
    let z = normal_quantile(1.0 - alpha / 2.0)?;
    let mut lower = Vec::with_capacity(estimate.len());
    let mut upper = Vec::with_capacity(estimate.len());
    let mut collapsed = Vec::with_capacity(estimate.len());
    for (t, &est) in estimate.iter().enumerate() {
        let half = z * ensemble.sd[t];
        lower.push(est - half);
        upper.push(est + half);
        collapsed.push(ensemble.sd[t] == 0.0);
    }
    Ok(BandResult {
        estimate: estimate.to_vec(),
        lower,
        upper,
        kind: BandKind::Wald,
        alpha,
        q_lo: -z,
        q_hi: z,
        collapsed,
    })
}

/// Correlation-and-multiplicity-adjusted band from bootstrap quantiles of
/// extreme standardized deviations; symmetric or asymmetric form.
pub fn cma_band(
    ensemble: &BootstrapEnsemble,
    estimate: &[f64],
    alpha: f64,
    symmetric: bool,
) -> Result<BandResult> {
    check_alpha(alpha)?;
    let b_count = ensemble.samples.nrows();
    let t = ensemble.sd.len();
    if estimate.len() != t {
        return Err(Error::data("estimate length does not match ensemble"));
    }
    let min_b = (2.0 / alpha).ceil() as usize;
    if b_count < min_b {
        return Err(Error::config(format!(
            "B = {b_count} is below the minimum {min_b} for alpha = {alpha}"
        )));
    }
    let valid: Vec<usize> = (0..t).filter(|&s| ensemble.sd[s] > 0.0).collect();
    let collapsed: Vec<bool> = (0..t).map(|s| ensemble.sd[s] == 0.0).collect();
    if valid.is_empty() {
        // Degenerate ensemble: every location collapses to the estimate.
        return Ok(BandResult {
            estimate: estimate.to_vec(),
            lower: estimate.to_vec(),
            upper: estimate.to_vec(),
            kind: if symmetric {
                BandKind::CmaSymmetric
            } else {
                BandKind::CmaAsymmetric
            },
            alpha,
            q_lo: 0.0,
            q_hi: 0.0,
            collapsed,
        })
    }

    let mut zmax = Vec::with_capacity(b_count);
    let mut zmin = Vec::with_capacity(b_count);
    for b in 0..b_count {
        let mut mx = f64::NEG_INFINITY;
        let mut mn = f64::INFINITY;
        for &s in &valid {
            let z = (ensemble.samples[(b, s)] - ensemble.mean[s]) / ensemble.sd[s];
            mx = mx.max(z);
            mn = mn.min(z);
        }
        zmax.push(mx);
        zmin.push(mn);
    }

    let (q_lo, q_hi) = if symmetric {
        // One quantile of the maxima pooled with the negated minima.
        let mut pooled = zmax.clone();
        pooled.extend(zmin.iter().map(|v| -v));
        let q = empirical_quantile_type1(&sorted(pooled), 1.0 - alpha / 2.0);
        (-q, q)
    } else {
        let q_hi = empirical_quantile_type1(&sorted(zmax), 1.0 - alpha / 2.0);
        // alpha/2 quantile of the minima, computed by negation symmetry.
        let q_lo = -empirical_quantile_type1(
            &sorted(zmin.iter().map(|v| -v).collect()),
            1.0 - alpha / 2.0,
        );
        // Keep the estimate inside the band in the degenerate case of a
        // one-sided bootstrap distribution.
        (q_lo.min(0.0), q_hi.max(0.0))
    };

    let mut lower = Vec::with_capacity(t);
    let mut upper = Vec::with_capacity(t);
    for s in 0..t {
        lower.push(estimate[s] - q_hi * ensemble.sd[s]);
        upper.push(estimate[s] - q_lo * ensemble.sd[s]);
    }
    Ok(BandResult {
        estimate: estimate.to_vec(),
        lower,
        upper,
        kind: if symmetric {
            BandKind::CmaSymmetric
        } else {
            BandKind::CmaAsymmetric
        },
        alpha,
        q_lo,
        q_hi,
        collapsed,
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("alpha must be in (0,1), got {alpha}")));
    }
    Ok(())
}

/// Mirror-symmetrize an ensemble: every sample is paired with its reflection
/// about the ensemble mean. The mean and pointwise SD are unchanged.
pub fn mirror_symmetrize(ensemble: &BootstrapEnsemble) -> BootstrapEnsemble {
    let (b, t) = (ensemble.samples.nrows(), ensemble.samples.ncols());
    let mut samples = DMatrix::zeros(2 * b, t);
    for r in 0..b {
        for s in 0..t {
            samples[(r, s)] = ensemble.samples[(r, s)];
            samples[(b + r, s)] = 2.0 * ensemble.mean[s] - ensemble.samples[(r, s)];
        }
    }
    BootstrapEnsemble {
        target: ensemble.target.clone(),
        samples,
        mean: ensemble.mean.clone(),
        sd: ensemble.sd.clone(),
        seed: ensemble.seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::fit_pipeline;
    use nalgebra::DMatrix;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_dataset(n: usize, t: usize, seed: u64) -> FunctionalDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid: Vec<f64> = (1..=t).map(|k| k as f64 / t as f64).collect();
        let x = DMatrix::from_fn(n, 2, |_, c| if c == 0 { 1.0 } else { rng.gen_range(-1.0..1.0) });
        let y = DMatrix::from_fn(n, t, |i, s| {
            let u = (s + 1) as f64 / t as f64;
            1.0 + x[(i, 1)] * (2.0 * std::f64::consts::PI * u).sin()
                + 0.3 * rng.gen_range(-1.0..1.0)
        });
        FunctionalDataset::new(y, x, grid, vec!["intercept".into(), "z".into()]).unwrap()
    }

    fn small_settings() -> FitSettings {
        FitSettings {
            n_knots: 6,
            fit_third: false,
            fit_fourth: false,
            ..FitSettings::default()
        }
    }

    fn toy_ensemble(seed: u64, b: usize) -> (BootstrapEnsemble, Vec<f64>) {
        let data = toy_dataset(25, 20, seed);
        let settings = small_settings();
        let basis = crate::pipeline::build_basis(&settings, &data.grid).unwrap();
        let targets = vec![TargetSpec::FixedEffect(1)];
        let ens = bootstrap_pipeline(&data, &basis, &settings, &targets, b, 99)
            .unwrap()
            .remove(0);
        let fit = fit_pipeline(&data, &settings).unwrap();
        let est = evaluate_target(&fit, &targets[0]).unwrap();
        (ens, est)
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let data = toy_dataset(20, 16, 1);
        let settings = small_settings();
        let basis = crate::pipeline::build_basis(&settings, &data.grid).unwrap();
        let targets = vec![TargetSpec::FixedEffect(0), TargetSpec::NoiseVariance];
        let a = bootstrap_pipeline(&data, &basis, &settings, &targets, 2, 7).unwrap();
        let b = bootstrap_pipeline(&data, &basis, &settings, &targets, 2, 7).unwrap();
        for (ea, eb) in a.iter().zip(&b) {
            assert_eq!(ea.samples, eb.samples);
        }
    }

    #[test]
    fn single_subject_resamples_have_zero_sd() {
        let data = toy_dataset(1, 14, 2);
        // Intercept-only design so a one-subject fit stays full rank.
        let data = FunctionalDataset::new(
            data.y.clone(),
            DMatrix::from_element(1, 1, 1.0),
            data.grid.clone(),
            vec!["intercept".into()],
        )
        .unwrap();
        let settings = FitSettings {
            n_knots: 5,
            fit_third: false,
            fit_fourth: false,
            ..FitSettings::default()
        };
        let basis = crate::pipeline::build_basis(&settings, &data.grid).unwrap();
        let targets = vec![TargetSpec::FixedEffect(0)];
        let ens = bootstrap_pipeline(&data, &basis, &settings, &targets, 3, 11).unwrap();
        for v in &ens[0].sd {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn wald_multiplier_and_symmetry() {
        let (ens, est) = toy_ensemble(3, 50);
        let band = wald_band(&ens, &est, 0.05).unwrap();
        assert!((band.q_hi - 1.959964).abs() < 1e-5);
        for t in 0..est.len() {
            let up = band.upper[t] - band.estimate[t];
            let dn = band.estimate[t] - band.lower[t];
            assert!((up - dn).abs() < 1e-12);
        }
    }

    #[test]
    fn type1_quantile_matches_sort_and_index_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in [7usize, 40, 100, 101] {
            let sample: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let s = sorted(sample.clone());
            for &p in &[0.025, 0.05, 0.5, 0.95, 0.975, 1.0] {
                let got = empirical_quantile_type1(&s, p);
                // Oracle: count-based inf{x : #(sample <= x)/n >= p}.
                let oracle = *s
                    .iter()
                    .find(|&&x| {
                        sample.iter().filter(|&&v| v <= x).count() as f64 / n as f64 >= p
                    })
                    .unwrap();
                assert_eq!(got, oracle, "n={n} p={p}");
            }
        }
    }

    #[test]
    fn mirror_symmetric_ensemble_makes_bands_coincide_exactly() {
        let (ens, est) = toy_ensemble(5, 60);
        let mirrored = mirror_symmetrize(&ens);
        let sym = cma_band(&mirrored, &est, 0.05, true).unwrap();
        let asym = cma_band(&mirrored, &est, 0.05, false).unwrap();
        assert_eq!(asym.q_hi, -asym.q_lo);
        assert_eq!(sym.q_hi, asym.q_hi);
        assert_eq!(sym.lower, asym.lower);
        assert_eq!(sym.upper, asym.upper);
    }

    #[test]
    fn symmetric_cma_contains_wald() {
        let (ens, est) = toy_ensemble(6, 80);
        let wald = wald_band(&ens, &est, 0.05).unwrap();
        let cma = cma_band(&ens, &est, 0.05, true).unwrap();
        for t in 0..est.len() {
            assert!(cma.lower[t] <= wald.lower[t] + 1e-12);
            assert!(cma.upper[t] >= wald.upper[t] - 1e-12);
        }
    }

    #[test]
    fn bands_are_monotone_in_level() {
        let (ens, est) = toy_ensemble(7, 100);
        for symmetric in [true, false] {
            let tight = cma_band(&ens, &est, 0.10, symmetric).unwrap();
            let wide = cma_band(&ens, &est, 0.01, symmetric).unwrap();
            for t in 0..est.len() {
                assert!(wide.lower[t] <= tight.lower[t] + 1e-12);
                assert!(wide.upper[t] >= tight.upper[t] - 1e-12);
            }
        }
    }

    #[test]
    fn estimate_lies_inside_all_bands() {
        let (ens, est) = toy_ensemble(8, 50);
        for band in [
            wald_band(&ens, &est, 0.05).unwrap(),
            cma_band(&ens, &est, 0.05, true).unwrap(),
            cma_band(&ens, &est, 0.05, false).unwrap(),
        ] {
            for t in 0..est.len() {
                assert!(band.lower[t] <= est[t] && est[t] <= band.upper[t]);
            }
        }
    }

    #[test]
    fn small_b_is_rejected_for_cma() {
        let (ens, est) = toy_ensemble(9, 50);
        let truncated = BootstrapEnsemble {
            target: ens.target.clone(),
            samples: ens.samples.rows(0, 10).into(),
            mean: ens.mean.clone(),
            sd: ens.sd.clone(),
            seed: ens.seed,
        };
        assert!(cma_band(&truncated, &est, 0.05, false).is_err());
    }
}
