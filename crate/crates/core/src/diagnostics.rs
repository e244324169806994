//! Finite-sample spectral diagnostics for the overestimated eigencomponents.
//!
//! Truth-conditioned checks on synthetic panels: Weyl gaps between the extra
//! sample singular values and the noise spectrum, probe incoherence of the
//! extra singular vectors, near-orthogonality with the true loadings and
//! factors, cross-term bounds, low-rank recovery error, and log-log rate
//! regressions across scale grids.

use nalgebra::{DMatrix, DVector};

use crate::error::{FopcaError, Result};
use crate::panel::{FactorStructure, Panel};
use crate::pca::PcaFit;
use crate::rng::CounterRng;
use crate::svd;

/// Probe vectors used to measure incoherence; generated independently of the
/// noise by construction (canonical basis vectors plus unit Gaussians from a
/// dedicated RNG stream).
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub left: Vec<DVector<f64>>,
    pub right: Vec<DVector<f64>>,
}

/// Stream id offset for probe draws, distinct from every noise object id.
const PROBE_OBJECT_BASE: u64 = 0x5052_4f42_0000_0000;

impl ProbeSet {
    /// 10 canonical basis vectors and 10 seeded unit Gaussian vectors per
    /// side (fewer canonical ones when the dimension is small).
    pub fn generate(n: usize, t: usize, seed: u64) -> Self {
        let left = Self::side(n, seed, 0);
        let right = Self::side(t, seed, 1);
        ProbeSet { left, right }
    }

    fn side(dim: usize, seed: u64, side_id: u64) -> Vec<DVector<f64>> {
        let mut probes = Vec::new();
        for i in 0..10.min(dim) {
            let mut e = DVector::zeros(dim);
            e[i] = 1.0;
            probes.push(e);
        }
        for k in 0..10u64 {
            let mut rng = CounterRng::new(seed, 0, PROBE_OBJECT_BASE + side_id * 16 + k);
            let mut v = DVector::from_fn(dim, |_, _| rng.standard_normal());
            let norm = v.norm();
            if norm > 0.0 {
                v /= norm;
            }
            probes.push(v);
        }
        probes
    }
}

/// Max over probes of the Euclidean norm of `probe' * vectors`.
pub fn max_probe_alignment(probes: &[DVector<f64>], vectors: &DMatrix<f64>) -> f64 {
    let mut best: f64 = 0.0;
    for p in probes {
        let row = vectors.transpose() * p;
        best = best.max(row.norm());
    }
    best
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

#[derive(Debug, Clone)]
pub struct ExtraSpectrumReport {
    /// lambda_k(U)^2 - lambda_{r+k}(X)^2 for k = 1..R-r; each >= -1e-9 by
    /// the deterministic Weyl inequality.
    pub gaps: Vec<f64>,
    pub incoherence_left: f64,
    pub incoherence_right: f64,
    pub ortho_left: f64,
    pub ortho_right: f64,
}

/// Diagnostics on the extra singular components beyond the true rank.
pub fn extra_spectrum(
    x: &Panel,
    truth: &FactorStructure,
    r_working: usize,
    probes: &ProbeSet,
) -> Result<ExtraSpectrumReport> {
    let u = truth
        .noise
        .as_ref()
        .ok_or_else(|| FopcaError::RequiresSynthetic("extra_spectrum needs the noise matrix".into()))?;
    let r = truth.rank;
    if r_working < r {
        return Err(FopcaError::Dimension(format!(
            "working dimension {} below true rank {}",
            r_working, r
        )));
    }
    if r_working == r {
        return Ok(ExtraSpectrumReport {
            gaps: Vec::new(),
            incoherence_left: 0.0,
            incoherence_right: 0.0,
            ortho_left: 0.0,
            ortho_right: 0.0,
        });
    }
    let triple = svd::svd_top(x, r_working)?;
    let sv_x = &triple.singular_values;
    let sv_u = svd::singular_values(u);
    let extra = r_working - r;
    let mut gaps = Vec::with_capacity(extra);
    for k in 0..extra {
        let lx = sv_x[r + k];
        let lu = sv_u.get(k).copied().unwrap_or(0.0);
        gaps.push(lu * lu - lx * lx);
    }
    let xi_extra: DMatrix<f64> = triple.left.columns(r, extra).into();
    let v_extra: DMatrix<f64> = triple.right.columns(r, extra).into();
    let incoherence_left = max_probe_alignment(&probes.left, &xi_extra);
    let incoherence_right = max_probe_alignment(&probes.right, &v_extra);
    let (ortho_left, ortho_right) = if r > 0 {
        let bt = truth.loadings.transpose() * &xi_extra;
        let ft = truth.factors.transpose() * &v_extra;
        (
            spectral_norm(&bt) / truth.loadings.norm(),
            spectral_norm(&ft) / truth.factors.norm(),
        )
    } else {
        (0.0, 0.0)
    };
    Ok(ExtraSpectrumReport { gaps, incoherence_left, incoherence_right, ortho_left, ortho_right })
}

/// Cross-term statistics `(|B_hat' U G_T| / (NT), |F_hat' U' G_N| / (NT))`
/// in spectral norm.
pub fn corollary_cross_terms(
    fit: &PcaFit,
    truth: &FactorStructure,
    g_n: &DMatrix<f64>,
    g_t: &DMatrix<f64>,
) -> Result<(f64, f64)> {
    let u = truth
        .noise
        .as_ref()
        .ok_or_else(|| FopcaError::RequiresSynthetic("cross terms need the noise matrix".into()))?;
    let n = fit.n_rows;
    let t = fit.n_cols;
    if g_n.nrows() != n || g_t.nrows() != t {
        return Err(FopcaError::Dimension(format!(
            "probe matrices must have {} and {} rows, got {} and {}",
            n,
            t,
            g_n.nrows(),
            g_t.nrows()
        )));
    }
    let nt = (n * t) as f64;
    let left = spectral_norm(&(fit.b_hat.transpose() * u * g_t)) / nt;
    let right = spectral_norm(&(fit.f_hat.transpose() * u.transpose() * g_n)) / nt;
    Ok((left, right))
}

/// Low-rank recovery error `|M_hat - M|_F / sqrt(NT)`.
pub fn lowrank_error(fit: &PcaFit, truth: &FactorStructure) -> f64 {
    let m = truth.signal();
    let nt = (fit.n_rows * fit.n_cols) as f64;
    (&fit.m_hat - m).norm() / nt.sqrt()
}

#[derive(Debug, Clone)]
pub struct RateFit {
    pub grid: Vec<(f64, f64)>,
    pub slope: f64,
    pub stderr: f64,
}

/// OLS slope of log(statistic) on log(scale) with its standard error.
pub fn rate_regression(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 3 {
        return Err(FopcaError::Input(format!(
            "rate regression needs >= 3 points, got {}",
            points.len()
        )));
    }
    for &(s, v) in points {
        if !(s > 0.0) || !(v > 0.0) {
            return Err(FopcaError::Range(format!(
                "nonpositive point (scale={}, statistic={}) in log-domain regression",
                s, v
            )));
        }
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|&(s, _)| s.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, v)| v.ln()).collect();
    let xbar = xs.iter().sum::<f64>() / n;
    let ybar = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xbar) * (x - xbar)).sum();
    if sxx == 0.0 {
        return Err(FopcaError::Input("all scales identical".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let ssr: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let e = y - intercept - slope * x;
            e * e
        })
        .sum();
    let stderr = if points.len() > 2 { (ssr / (n - 2.0) / sxx).sqrt() } else { 0.0 };
    Ok(RateFit { grid: points.to_vec(), slope, stderr })
}

/// Boundary case r = 0: max probe alignment with all R leading singular
/// vectors of a pure-noise panel, on both sides.
pub fn boundary_case_r0(x: &Panel, r_working: usize, probes: &ProbeSet) -> Result<(f64, f64)> {
    if r_working == 0 {
        return Err(FopcaError::Input("working dimension must be positive".into()));
    }
    let triple = svd::svd_top(x, r_working)?;
    Ok((
        max_probe_alignment(&probes.left, &triple.left),
        max_probe_alignment(&probes.right, &triple.right),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn synthetic(n: usize, t: usize, r: usize, noise_scale: f64, seed: u64) -> (Panel, FactorStructure) {
        let mut rng = CounterRng::new(seed, 0, 0);
        let b = DMatrix::from_fn(n, r, |_, _| rng.standard_normal());
        let f = DMatrix::from_fn(t, r, |_, _| rng.standard_normal());
        let mut noise_rng = CounterRng::new(seed, 0, 1);
        let u = DMatrix::from_fn(n, t, |_, _| noise_scale * noise_rng.standard_normal());
        let x = &b * f.transpose() + &u;
        (Panel::new(x).unwrap(), FactorStructure::new(b, f, Some(u)).unwrap())
    }

    #[test]
    fn noiseless_gaps_are_zero() {
        let (_, mut truth) = synthetic(30, 40, 2, 0.0, 1);
        truth.noise = Some(DMatrix::zeros(30, 40));
        let x = Panel::new(truth.signal()).unwrap();
        let probes = ProbeSet::generate(30, 40, 1);
        let report = extra_spectrum(&x, &truth, 5, &probes).unwrap();
        for g in &report.gaps {
            assert_abs_diff_eq!(g, &0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn weyl_gaps_nonnegative_over_seeds() {
        for seed in 0..20 {
            let (x, truth) = synthetic(40, 60, 2, 1.0, seed);
            let probes = ProbeSet::generate(40, 60, seed);
            let report = extra_spectrum(&x, &truth, 6, &probes).unwrap();
            for g in &report.gaps {
                assert!(*g >= -1e-9, "seed {}: gap {}", seed, g);
            }
        }
    }

    #[test]
    fn incoherence_bounded_and_ortho_small_for_strong_factors() {
        let (x, truth) = synthetic(200, 200, 2, 0.3, 7);
        let probes = ProbeSet::generate(200, 200, 7);
        let report = extra_spectrum(&x, &truth, 5, &probes).unwrap();
        let extra = 3.0f64;
        assert!(report.incoherence_left <= extra.sqrt() + 1e-12);
        assert!(report.incoherence_right <= extra.sqrt() + 1e-12);
        assert!(report.ortho_left >= 0.0 && report.ortho_left <= 1.0);
        assert!(report.ortho_right >= 0.0 && report.ortho_right <= 1.0);
        // strong factors: the extra eigenvectors are nearly orthogonal to B
        assert!(report.ortho_left < 0.1, "ortho_left = {}", report.ortho_left);
    }

    #[test]
    fn r_equal_rank_gives_empty_report() {
        let (x, truth) = synthetic(30, 40, 2, 1.0, 3);
        let probes = ProbeSet::generate(30, 40, 3);
        let report = extra_spectrum(&x, &truth, 2, &probes).unwrap();
        assert!(report.gaps.is_empty());
        assert_eq!(report.incoherence_left, 0.0);
    }

    #[test]
    fn missing_noise_is_requires_synthetic() {
        let (x, mut truth) = synthetic(20, 25, 1, 1.0, 4);
        truth.noise = None;
        let probes = ProbeSet::generate(20, 25, 4);
        assert!(matches!(
            extra_spectrum(&x, &truth, 3, &probes),
            Err(FopcaError::RequiresSynthetic(_))
        ));
    }

    #[test]
    fn localized_fake_eigenvector_has_full_coherence() {
        // the canonical-basis counterexample: a unit coordinate vector column
        let n = 50;
        let mut fake = DMatrix::zeros(n, 1);
        fake[(0, 0)] = 1.0;
        let probes = ProbeSet::generate(n, n, 11);
        let stat = max_probe_alignment(&probes.left, &fake);
        assert_abs_diff_eq!(stat, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn cross_terms_zero_without_noise_energy() {
        let (_, mut truth) = synthetic(30, 40, 2, 0.0, 5);
        truth.noise = Some(DMatrix::zeros(30, 40));
        let x = Panel::new(truth.signal()).unwrap();
        let fit = crate::pca::fit(&x, 4).unwrap();
        let g_n = DMatrix::from_element(30, 1, 1.0);
        let g_t = DMatrix::from_element(40, 1, 1.0);
        let (a, b) = corollary_cross_terms(&fit, &truth, &g_n, &g_t).unwrap();
        assert_abs_diff_eq!(a, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn cross_terms_dimension_mismatch() {
        let (x, truth) = synthetic(30, 40, 2, 1.0, 6);
        let fit = crate::pca::fit(&x, 4).unwrap();
        let g_bad = DMatrix::from_element(31, 1, 1.0);
        let g_t = DMatrix::from_element(40, 1, 1.0);
        assert!(matches!(
            corollary_cross_terms(&fit, &truth, &g_bad, &g_t),
            Err(FopcaError::Dimension(_))
        ));
    }

    #[test]
    fn lowrank_error_zero_noiseless() {
        let (_, truth) = synthetic(30, 40, 2, 0.0, 8);
        let x = Panel::new(truth.signal()).unwrap();
        for r_working in [2usize, 3, 6] {
            let fit = crate::pca::fit(&x, r_working).unwrap();
            assert!(lowrank_error(&fit, &truth) < 1e-10);
        }
    }

    #[test]
    fn rate_regression_exact_power_law() {
        let points: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0].iter().map(|&x: &f64| (x, x.powi(-2))).collect();
        let fit = rate_regression(&points).unwrap();
        assert_abs_diff_eq!(fit.slope, -2.0, epsilon = 1e-12);
        assert!(fit.stderr < 1e-12);
    }

    #[test]
    fn rate_regression_constant() {
        let fit = rate_regression(&[(1.0, 1.0), (2.0, 1.0), (4.0, 1.0)]).unwrap();
        assert_abs_diff_eq!(fit.slope, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn rate_regression_noisy_known_exponent() {
        let mut rng = CounterRng::new(13, 0, 0);
        let points: Vec<(f64, f64)> = (1..=20)
            .map(|k| {
                let x = k as f64 * 10.0;
                (x, x.powi(-1) * (1.0 + 0.05 * rng.standard_normal()).abs())
            })
            .collect();
        let fit = rate_regression(&points).unwrap();
        assert!((fit.slope + 1.0).abs() < 0.2, "slope = {}", fit.slope);
    }

    #[test]
    fn rate_regression_rejects_bad_input() {
        assert!(rate_regression(&[(1.0, 1.0), (2.0, 0.5)]).is_err());
        assert!(matches!(
            rate_regression(&[(1.0, 1.0), (2.0, -0.5), (3.0, 0.1)]),
            Err(FopcaError::Range(_))
        ));
    }

    #[test]
    fn boundary_self_alignment_is_one() {
        // a probe equal to the extracted singular vector itself aligns fully,
        // documenting why probes must be independent of the noise
        let (x, _) = synthetic(60, 80, 0, 1.0, 9);
        let triple = svd::svd_top(&x, 1).unwrap();
        let probe: DVector<f64> = triple.left.column(0).into();
        let stat = max_probe_alignment(&[probe], &triple.left.columns(0, 1).into());
        assert_abs_diff_eq!(stat, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn boundary_pure_noise_probe_alignment_is_modest() {
        let (x, _) = synthetic(400, 400, 0, 1.0, 10);
        let probes = ProbeSet::generate(400, 400, 10);
        let (left, _right) = boundary_case_r0(&x, 1, &probes).unwrap();
        assert!(left < 0.25, "left alignment = {}", left);
    }
}
