//! Fixed-order PCA estimators and the expanded/compressed rotation machinery.

use nalgebra::DMatrix;

use crate::error::{FopcaError, Result};
use crate::panel::{FactorStructure, Panel};
use crate::svd::{pseudo_inverse, singular_values, svd_top, SvdTriple, RANK_TOL};

/// PCA fit of a panel at working dimension R.
///
/// `b_hat = sqrt(N) Xi_R`, `f_hat = V_R L_R / sqrt(N)`, `m_hat = Xi_R L_R V_R'`,
/// `s_f_hat = L_R^2 / (TN)`.
#[derive(Debug, Clone)]
pub struct PcaFit {
    pub triple: SvdTriple,
    pub b_hat: DMatrix<f64>,
    pub f_hat: DMatrix<f64>,
    pub m_hat: DMatrix<f64>,
    pub s_f_hat: DMatrix<f64>,
    pub working_dim: usize,
    pub n_rows: usize,
    pub n_cols: usize,
}

/// Column partition of a fit into the spiked (leading r) and extra
/// (remaining R - r) eigencomponents.
#[derive(Debug, Clone)]
pub struct SplitFit {
    pub spiked_left: DMatrix<f64>,
    pub spiked_right: DMatrix<f64>,
    pub spiked_values: Vec<f64>,
    pub extra_left: DMatrix<f64>,
    pub extra_right: DMatrix<f64>,
    pub extra_values: Vec<f64>,
    pub assumed_rank: usize,
}

/// The expanded rotation H (R x r) and its Moore-Penrose compression H+.
#[derive(Debug, Clone)]
pub struct RotationPair {
    /// R x r; its transpose is H' = B' b_hat / N.
    pub h: DMatrix<f64>,
    /// R x r map with H' H+ = I_r, computed as (HH')+ H.
    pub h_plus: DMatrix<f64>,
    pub smallest_singular: f64,
    pub degenerate: bool,
}

/// Alignment of the fitted factor space with known ground truth.
#[derive(Debug, Clone)]
pub enum AlignmentReport {
    /// r = 0: no rotation exists.
    Empty,
    Full {
        /// ||F_hat - F H'|| / sqrt(T)
        expanded_err: f64,
        /// ||F'(F_hat - F H')|| / T
        expanded_proj_err: f64,
        /// ||F_hat H+ - F|| / sqrt(T)
        compressed_err: f64,
        /// ||F'(F_hat H+ - F)|| / T
        compressed_proj_err: f64,
        /// ||H'(F_hat'F_hat/T)^{-1} H - (F'F/T)^{-1}||
        sandwich_discrepancy: f64,
        degenerate: bool,
    },
}

/// Fit fixed-order PCA at working dimension R.
pub fn fit(x: &Panel, working_dim: usize) -> Result<PcaFit> {
    let (n, t) = (x.n_rows(), x.n_cols());
    if working_dim == 0 || working_dim > n.min(t) {
        return Err(FopcaError::Dimension(format!(
            "R = {} out of range 1..={}",
            working_dim,
            n.min(t)
        )));
    }
    let triple = svd_top(x, working_dim)?;
    Ok(fit_from_triple(triple, n, t))
}

/// Build the PCA estimators from an already-computed top-R triple.
pub fn fit_from_triple(triple: SvdTriple, n: usize, t: usize) -> PcaFit {
    let r = triple.k();
    let sqrt_n = (n as f64).sqrt();
    let b_hat = &triple.left * sqrt_n;
    let mut f_hat = triple.right.clone();
    for (j, s) in triple.singular_values.iter().enumerate() {
        f_hat.column_mut(j).scale_mut(s / sqrt_n);
    }
    let m_hat = triple.reconstruct();
    let mut s_f_hat = DMatrix::zeros(r, r);
    for (j, s) in triple.singular_values.iter().enumerate() {
        s_f_hat[(j, j)] = s * s / (t as f64 * n as f64);
    }
    PcaFit { triple, b_hat, f_hat, m_hat, s_f_hat, working_dim: r, n_rows: n, n_cols: t }
}

/// Partition the fit into spiked columns 1..r and extra columns r+1..R.
pub fn split(fit: &PcaFit, assumed_rank: usize) -> Result<SplitFit> {
    let r_work = fit.working_dim;
    if assumed_rank > r_work {
        return Err(FopcaError::Dimension(format!(
            "assumed rank {} exceeds working dimension {}",
            assumed_rank, r_work
        )));
    }
    let extra = r_work - assumed_rank;
    Ok(SplitFit {
        spiked_left: fit.triple.left.columns(0, assumed_rank).into(),
        spiked_right: fit.triple.right.columns(0, assumed_rank).into(),
        spiked_values: fit.triple.singular_values[..assumed_rank].to_vec(),
        extra_left: fit.triple.left.columns(assumed_rank, extra).into(),
        extra_right: fit.triple.right.columns(assumed_rank, extra).into(),
        extra_values: fit.triple.singular_values[assumed_rank..].to_vec(),
        assumed_rank,
    })
}

/// Expanded rotation H' = B' b_hat / N, returned as the R x r matrix H.
pub fn expanded_rotation(b: &DMatrix<f64>, fit: &PcaFit) -> Result<RotationPair> {
    let r = b.ncols();
    if r == 0 {
        return Err(FopcaError::Dimension("expanded rotation requires r >= 1".into()));
    }
    if b.nrows() != fit.n_rows {
        return Err(FopcaError::Dimension(format!(
            "B has {} rows but the fit was computed on N = {}",
            b.nrows(),
            fit.n_rows
        )));
    }
    let h_prime = (b.transpose() * &fit.b_hat) / fit.n_rows as f64; // r x R
    let h = h_prime.transpose(); // R x r
    let sv = singular_values(&h);
    let smallest = sv[r.min(sv.len()) - 1];
    let degenerate = smallest <= RANK_TOL * sv[0].max(1.0);
    let h_plus = pseudo_inverse(&(&h * h.transpose())) * &h; // R x r
    Ok(RotationPair { h, h_plus, smallest_singular: smallest, degenerate })
}

/// The compression H+ of a non-degenerate rotation pair.
pub fn compressed_rotation(pair: &RotationPair) -> Result<DMatrix<f64>> {
    if pair.degenerate {
        return Err(FopcaError::Singularity(format!(
            "rotation degenerate: lambda_r(H) = {:.3e}",
            pair.smallest_singular
        )));
    }
    Ok(pair.h_plus.clone())
}

fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    singular_values(a)[0]
}

/// Alignment diagnostics against known ground truth (synthetic mode only).
pub fn factor_alignment(fit: &PcaFit, truth: &FactorStructure) -> Result<AlignmentReport> {
    if truth.rank == 0 {
        return Ok(AlignmentReport::Empty);
    }
    let pair = expanded_rotation(&truth.loadings, fit)?;
    let t = fit.n_cols as f64;
    let f = &truth.factors;
    let h_prime = pair.h.transpose(); // r x R

    let expanded_resid = &fit.f_hat - f * &h_prime;
    let expanded_err = spectral_norm(&expanded_resid) / t.sqrt();
    let expanded_proj_err = spectral_norm(&(f.transpose() * &expanded_resid)) / t;

    let compressed_resid = &fit.f_hat * &pair.h_plus - f;
    let compressed_err = spectral_norm(&compressed_resid) / t.sqrt();
    let compressed_proj_err = spectral_norm(&(f.transpose() * &compressed_resid)) / t;

    let s_f_hat_inv = fit
        .s_f_hat
        .clone()
        .try_inverse()
        .ok_or_else(|| FopcaError::Singularity("s_f_hat singular".into()))?;
    let s_f = (f.transpose() * f) / t;
    let s_f_inv = s_f
        .try_inverse()
        .ok_or_else(|| FopcaError::Singularity("F'F/T singular".into()))?;
    let sandwich = &h_prime * s_f_hat_inv * &pair.h - s_f_inv;
    let sandwich_discrepancy = spectral_norm(&sandwich);

    Ok(AlignmentReport::Full {
        expanded_err,
        expanded_proj_err,
        compressed_err,
        compressed_proj_err,
        sandwich_discrepancy,
        degenerate: pair.degenerate,
    })
}

/// Write a fit to a directory: b_hat.csv, f_hat.csv, singular_values.csv and
/// a JSON manifest {N, T, R}.
pub fn write_fit_dir(fit: &PcaFit, dir: &std::path::Path) -> Result<()> {
    use crate::panel::{format_f64, write_matrix_csv};
    use std::io::Write;
    std::fs::create_dir_all(dir)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("b_hat.csv"))?);
    write_matrix_csv(&mut f, &fit.b_hat)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("f_hat.csv"))?);
    write_matrix_csv(&mut f, &fit.f_hat)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("singular_values.csv"))?);
    for s in &fit.triple.singular_values {
        writeln!(f, "{}", format_f64(*s))?;
    }
    let manifest = serde_json::json!({
        "N": fit.n_rows,
        "T": fit.n_cols,
        "R": fit.working_dim,
    });
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).unwrap())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use crate::svd::svd_top_matrix;
    use approx::assert_abs_diff_eq;

    fn random_matrix(n: usize, t: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = CounterRng::new(seed, 0, 0);
        DMatrix::from_fn(n, t, |_, _| rng.standard_normal())
    }

    fn synthetic(n: usize, t: usize, r: usize, noise_scale: f64, seed: u64) -> (Panel, FactorStructure) {
        let b = random_matrix(n, r, seed);
        let f = random_matrix(t, r, seed.wrapping_add(1));
        let u = random_matrix(n, t, seed.wrapping_add(2)) * noise_scale;
        let x = &b * f.transpose() + &u;
        let panel = Panel::new(x).unwrap();
        let truth = FactorStructure::new(b, f, Some(u)).unwrap();
        (panel, truth)
    }

    fn check_fit_invariants(fit: &PcaFit, x: &Panel) {
        let n = fit.n_rows as f64;
        let t = fit.n_cols as f64;
        let r = fit.working_dim;
        // b_hat' b_hat / N = I_R
        let gram = (fit.b_hat.transpose() * &fit.b_hat) / n;
        assert!((gram - DMatrix::identity(r, r)).amax() < 1e-10);
        // f_hat = X' b_hat / N
        let alt = (x.data().transpose() * &fit.b_hat) / n;
        assert!((&alt - &fit.f_hat).amax() < 1e-10);
        // m_hat = X V_R V_R'
        let proj = x.data() * &fit.triple.right * fit.triple.right.transpose();
        assert!((&proj - &fit.m_hat).amax() < 1e-10);
        // s_f_hat = f_hat' f_hat / T
        let sf = (fit.f_hat.transpose() * &fit.f_hat) / t;
        assert!((&sf - &fit.s_f_hat).amax() < 1e-10);
    }

    #[test]
    fn noiseless_recovery_r_equals_rank() {
        let (panel, truth) = synthetic(15, 20, 2, 0.0, 100);
        let fit = fit(&panel, 2).unwrap();
        assert!((&fit.m_hat - &truth.signal()).amax() < 1e-10);
        check_fit_invariants(&fit, &panel);
    }

    #[test]
    fn noiseless_overestimated_working_dim() {
        let (panel, truth) = synthetic(15, 20, 2, 0.0, 101);
        let fit = fit(&panel, 4).unwrap();
        assert!(fit.triple.singular_values[2].abs() < 1e-8);
        assert!(fit.triple.singular_values[3].abs() < 1e-8);
        assert!((&fit.m_hat - &truth.signal()).amax() < 1e-8);
    }

    #[test]
    fn noisy_fit_matches_full_svd_truncation() {
        let (panel, _) = synthetic(60, 90, 2, 1.0, 102);
        let pf = fit(&panel, 5).unwrap();
        let full = svd_top_matrix(panel.data(), 5).unwrap();
        assert!((&pf.m_hat - full.reconstruct()).norm() < 1e-8);
        check_fit_invariants(&pf, &panel);
    }

    #[test]
    fn split_partitions() {
        let (panel, _) = synthetic(30, 40, 2, 0.5, 103);
        let pf = fit(&panel, 5).unwrap();
        let s = split(&pf, 2).unwrap();
        assert_eq!(s.spiked_left.ncols(), 2);
        assert_eq!(s.extra_left.ncols(), 3);
        for j in 0..3 {
            for i in 0..30 {
                assert_eq!(s.extra_left[(i, j)], pf.triple.left[(i, j + 2)]);
            }
        }
        let all = split(&pf, 5).unwrap();
        assert_eq!(all.extra_left.ncols(), 0);
        let none = split(&pf, 0).unwrap();
        assert_eq!(none.spiked_left.ncols(), 0);
        assert_eq!(none.extra_left.ncols(), 5);
        assert!(split(&pf, 6).is_err());
    }

    #[test]
    fn expanded_rotation_noiseless_square() {
        let (panel, truth) = synthetic(25, 30, 2, 0.0, 104);
        let pf = fit(&panel, 2).unwrap();
        let pair = expanded_rotation(&truth.loadings, &pf).unwrap();
        assert!(!pair.degenerate);
        let resid = &pf.f_hat - &truth.factors * pair.h.transpose();
        assert!(resid.amax() < 1e-8);
    }

    #[test]
    fn expanded_rotation_noiseless_extra_columns_vanish() {
        let (panel, truth) = synthetic(25, 30, 2, 0.0, 105);
        let pf = fit(&panel, 4).unwrap();
        let pair = expanded_rotation(&truth.loadings, &pf).unwrap();
        // last two rows of H (columns of H') are zero: extra singular vectors
        // orthogonal to col(B) when there is no noise
        for k in 2..4 {
            for j in 0..2 {
                assert!(pair.h[(k, j)].abs() < 1e-8);
            }
        }
    }

    #[test]
    fn compressed_rotation_square_case() {
        let (panel, truth) = synthetic(25, 30, 2, 0.0, 106);
        let pf = fit(&panel, 2).unwrap();
        let pair = expanded_rotation(&truth.loadings, &pf).unwrap();
        let h_plus = compressed_rotation(&pair).unwrap();
        let left = pair.h.transpose() * &h_plus;
        assert!((left - DMatrix::identity(2, 2)).amax() < 1e-10);
        let right = &h_plus * pair.h.transpose();
        assert!((right - DMatrix::identity(2, 2)).amax() < 1e-10);
    }

    #[test]
    fn compressed_rotation_orthonormal_block() {
        let mut h = DMatrix::zeros(5, 2);
        h[(0, 0)] = 1.0;
        h[(1, 1)] = 1.0;
        let h_plus = pseudo_inverse(&(&h * h.transpose())) * &h;
        assert!((&h_plus - &h).amax() < 1e-12);
    }

    #[test]
    fn compressed_rotation_matches_pinv_oracle() {
        let h = random_matrix(6, 3, 107);
        let h_plus = pseudo_inverse(&(&h * h.transpose())) * &h;
        let oracle = pseudo_inverse(&h.transpose()); // (H')+ = H+ column map
        assert!((&h_plus - &oracle).amax() < 1e-10);
        assert!((h.transpose() * &h_plus - DMatrix::identity(3, 3)).amax() < 1e-10);
    }

    #[test]
    fn identity_2_2_and_2_3_exact_in_samples() {
        for seed in [200u64, 201, 202] {
            let (panel, truth) = synthetic(40, 50, 2, 1.0, seed);
            let pf = fit(&panel, 4).unwrap();
            let pair = expanded_rotation(&truth.loadings, &pf).unwrap();
            let u = truth.noise.as_ref().unwrap();
            let n = 40.0;
            // (2.2): F_hat - F H' = U' B_hat / N
            let lhs = &pf.f_hat - &truth.factors * pair.h.transpose();
            let rhs = (u.transpose() * &pf.b_hat) / n;
            assert!((lhs - &rhs).amax() < 1e-9);
            // (2.3): F_hat H+ - F = U' B_hat H+ / N
            if !pair.degenerate {
                let lhs = &pf.f_hat * &pair.h_plus - &truth.factors;
                let rhs = rhs * &pair.h_plus;
                assert!((lhs - rhs).amax() < 1e-9);
            }
        }
    }

    #[test]
    fn projection_idempotence_and_monotone_fit() {
        let (panel, _) = synthetic(30, 45, 3, 1.0, 300);
        let mut prev = f64::INFINITY;
        for r_work in 1..=6 {
            let pf = fit(&panel, r_work).unwrap();
            let reproj = &pf.m_hat * &pf.triple.right * pf.triple.right.transpose();
            assert!((&reproj - &pf.m_hat).amax() < 1e-10);
            let err = (panel.data() - &pf.m_hat).norm();
            assert!(err <= prev + 1e-12);
            prev = err;
        }
    }

    #[test]
    fn factor_alignment_noiseless_all_small() {
        let (panel, truth) = synthetic(30, 40, 2, 0.0, 400);
        let pf = fit(&panel, 2).unwrap();
        match factor_alignment(&pf, &truth).unwrap() {
            AlignmentReport::Full {
                expanded_err,
                expanded_proj_err,
                compressed_err,
                compressed_proj_err,
                sandwich_discrepancy,
                ..
            } => {
                assert!(expanded_err < 1e-8);
                assert!(expanded_proj_err < 1e-8);
                assert!(compressed_err < 1e-8);
                assert!(compressed_proj_err < 1e-8);
                assert!(sandwich_discrepancy < 1e-6);
            }
            AlignmentReport::Empty => panic!("expected full report"),
        }
    }

    #[test]
    fn factor_alignment_empty_when_rank_zero() {
        let u = random_matrix(20, 25, 500);
        let panel = Panel::new(u.clone()).unwrap();
        let truth = FactorStructure::new(
            DMatrix::zeros(20, 0),
            DMatrix::zeros(25, 0),
            Some(u),
        )
        .unwrap();
        let pf = fit(&panel, 3).unwrap();
        assert!(matches!(factor_alignment(&pf, &truth).unwrap(), AlignmentReport::Empty));
    }

    #[test]
    fn s_f_hat_positive_definite_with_noise() {
        let (panel, _) = synthetic(30, 40, 2, 1.0, 600);
        let pf = fit(&panel, 5).unwrap();
        for j in 0..5 {
            assert!(pf.s_f_hat[(j, j)] > 0.0);
        }
        assert_abs_diff_eq!(
            pf.s_f_hat[(0, 0)],
            pf.triple.singular_values[0].powi(2) / (30.0 * 40.0),
            epsilon = 1e-12
        );
    }
}
