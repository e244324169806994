//! Canonical rotation algebra tying (B, F) to the singular vectors of M = BF'.
//!
//! For nonsingular S_B = B'B/N and S_f = F'F/T with distinct eigenvalues of
//! S_B^{1/2} S_f S_B^{1/2}, the rotations H_B = S_B^{-1/2} G_B and
//! H_F = S_f^{-1/2} G_F satisfy
//!   N^{-1/2} B H_B = Xi_r,   T^{-1/2} F H_F = V_r,   (H_F' H_B)^{-1} = (NT)^{-1/2} L_r,
//! where G_B and G_F collect the eigenvectors of S_B^{1/2} S_f S_B^{1/2} and
//! S_f^{1/2} S_B S_f^{1/2}.

use nalgebra::DMatrix;

use crate::error::{FopcaError, Result};
use crate::svd::RANK_TOL;

/// Relative eigenvalue gap below which a degeneracy warning is raised.
pub const TIE_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct CanonicalRotation {
    /// r x r invertible map with N^{-1/2} B h_b = Xi_r.
    pub h_b: DMatrix<f64>,
    /// r x r invertible map with T^{-1/2} F h_f = V_r.
    pub h_f: DMatrix<f64>,
    /// Shared eigenvalues of S_B^{1/2} S_f S_B^{1/2}, nonincreasing.
    pub j: Vec<f64>,
    /// Set when two eigenvalues are closer than TIE_TOL in relative gap;
    /// the output is still deterministic but column identification is fragile.
    pub tie_warning: bool,
}

/// Symmetric eigendecomposition with eigenvalues sorted nonincreasing and a
/// deterministic eigenvector sign (first coordinate of largest magnitude
/// positive).
fn sym_eigen_sorted(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    let mut values = Vec::with_capacity(n);
    let mut vectors = DMatrix::zeros(n, n);
    for (out_j, &src_j) in order.iter().enumerate() {
        values.push(eig.eigenvalues[src_j]);
        vectors.column_mut(out_j).copy_from(&eig.eigenvectors.column(src_j));
        // sign fix: first nonzero coordinate positive
        let col = vectors.column(out_j);
        let lead = col.iter().find(|x| x.abs() > 1e-14).copied().unwrap_or(1.0);
        if lead < 0.0 {
            vectors.column_mut(out_j).neg_mut();
        }
    }
    (values, vectors)
}

/// Matrix power of a symmetric positive-definite matrix via eigendecomposition.
fn spd_power(a: &DMatrix<f64>, exponent: f64) -> Result<DMatrix<f64>> {
    let (values, vectors) = sym_eigen_sorted(a);
    let max = values[0];
    if max <= 0.0 || values.iter().any(|&v| v < RANK_TOL * max) {
        return Err(FopcaError::Rank("matrix is numerically singular".into()));
    }
    let mut d = DMatrix::zeros(values.len(), values.len());
    for (i, v) in values.iter().enumerate() {
        d[(i, i)] = v.powf(exponent);
    }
    Ok(&vectors * d * vectors.transpose())
}

/// Construct the canonical rotation for given loadings and factors.
pub fn canonical_normalization(b: &DMatrix<f64>, f: &DMatrix<f64>) -> Result<CanonicalRotation> {
    let r = b.ncols();
    if r == 0 || f.ncols() != r {
        return Err(FopcaError::Dimension(format!(
            "need r >= 1 with matching columns, got B: {} cols, F: {} cols",
            b.ncols(),
            f.ncols()
        )));
    }
    let n = b.nrows() as f64;
    let t = f.nrows() as f64;
    let s_b = (b.transpose() * b) / n;
    let s_f = (f.transpose() * f) / t;

    let s_b_half = spd_power(&s_b, 0.5).map_err(|_| FopcaError::Rank("S_B singular".into()))?;
    let s_b_inv_half =
        spd_power(&s_b, -0.5).map_err(|_| FopcaError::Rank("S_B singular".into()))?;
    let s_f_half = spd_power(&s_f, 0.5).map_err(|_| FopcaError::Rank("S_f singular".into()))?;
    let s_f_inv_half =
        spd_power(&s_f, -0.5).map_err(|_| FopcaError::Rank("S_f singular".into()))?;

    let prod_b = &s_b_half * &s_f * &s_b_half;
    let (j, g_b) = sym_eigen_sorted(&prod_b);
    let prod_f = &s_f_half * &s_b * &s_f_half;
    let (_, g_f) = sym_eigen_sorted(&prod_f);

    let mut tie_warning = false;
    for w in j.windows(2) {
        let scale = w[0].abs().max(w[1].abs()).max(1e-300);
        if (w[0] - w[1]).abs() / scale < TIE_TOL {
            tie_warning = true;
        }
    }

    let mut h_b = &s_b_inv_half * g_b;
    let mut h_f = &s_f_inv_half * g_f;

    // Align H_B column signs with the SVD sign convention applied to
    // Xi_r = N^{-1/2} B H_B (largest-|.| entry of each column positive).
    let xi = (b * &h_b) / n.sqrt();
    for jcol in 0..r {
        let col = xi.column(jcol);
        let mut best_idx = 0;
        let mut best_abs = -1.0;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > best_abs {
                best_abs = x.abs();
                best_idx = i;
            }
        }
        if col[best_idx] < 0.0 {
            h_b.column_mut(jcol).neg_mut();
        }
    }
    // Fix H_F signs so H_F' H_B has a positive diagonal, matching
    // (H_F' H_B)^{-1} = (NT)^{-1/2} L_r with positive singular values.
    let cross = h_f.transpose() * &h_b;
    for jcol in 0..r {
        if cross[(jcol, jcol)] < 0.0 {
            h_f.column_mut(jcol).neg_mut();
        }
    }

    Ok(CanonicalRotation { h_b, h_f, j, tie_warning })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use crate::svd::svd_top_matrix;
    use approx::assert_abs_diff_eq;

    fn orthonormal_columns(n: usize, r: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = CounterRng::new(seed, 0, 0);
        let raw = DMatrix::from_fn(n, r, |_, _| rng.standard_normal());
        let qr = raw.qr();
        qr.q().columns(0, r).into()
    }

    fn check_identities(b: &DMatrix<f64>, f: &DMatrix<f64>, rot: &CanonicalRotation, tol: f64) {
        let n = b.nrows() as f64;
        let t = f.nrows() as f64;
        let r = b.ncols();
        let m = b * f.transpose();
        let triple = svd_top_matrix(&m, r).unwrap();
        // identity: N^{-1/2} B H_B = Xi_r under the shared sign convention
        let xi = (b * &rot.h_b) / n.sqrt();
        assert!((&xi - &triple.left).amax() < tol, "Xi identity failed: {}", (&xi - &triple.left).amax());
        // identity (2.1): (H_F' H_B)^{-1} = (NT)^{-1/2} L_r
        let cross = rot.h_f.transpose() * &rot.h_b;
        let inv = cross.try_inverse().unwrap();
        for k in 0..r {
            assert_abs_diff_eq!(
                inv[(k, k)],
                triple.singular_values[k] / (n * t).sqrt(),
                epsilon = tol
            );
        }
        for i in 0..r {
            for jcol in 0..r {
                if i != jcol {
                    assert!(inv[(i, jcol)].abs() < tol);
                }
            }
        }
    }

    #[test]
    fn diagonal_case_j_is_4_1() {
        let n = 8;
        let t = 10;
        let q_b = orthonormal_columns(n, 2, 1);
        let q_f = orthonormal_columns(t, 2, 2);
        // S_B = diag(4, 1), S_f = I
        let mut b = q_b * (n as f64).sqrt();
        b.column_mut(0).scale_mut(2.0);
        let f = q_f * (t as f64).sqrt();
        let rot = canonical_normalization(&b, &f).unwrap();
        assert_abs_diff_eq!(rot.j[0], 4.0, epsilon = 1e-10);
        assert_abs_diff_eq!(rot.j[1], 1.0, epsilon = 1e-10);
        check_identities(&b, &f, &rot, 1e-10);
    }

    #[test]
    fn scalar_case() {
        let n = 6;
        let t = 9;
        let q_b = orthonormal_columns(n, 1, 3);
        let q_f = orthonormal_columns(t, 1, 4);
        let b = q_b * (2.0 * (n as f64).sqrt()); // S_B = 4
        let f = q_f * (t as f64).sqrt(); // S_f = 1
        let rot = canonical_normalization(&b, &f).unwrap();
        assert_abs_diff_eq!(rot.j[0], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rot.h_b[(0, 0)].abs(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(rot.h_f[(0, 0)].abs(), 1.0, epsilon = 1e-12);
        check_identities(&b, &f, &rot, 1e-10);
    }

    #[test]
    fn random_rank3_reproduces_svd() {
        let mut rng = CounterRng::new(11, 0, 0);
        let b = DMatrix::from_fn(20, 3, |_, _| rng.standard_normal());
        let f = DMatrix::from_fn(30, 3, |_, _| rng.standard_normal());
        let rot = canonical_normalization(&b, &f).unwrap();
        check_identities(&b, &f, &rot, 1e-8);
    }

    #[test]
    fn singular_s_b_rejected() {
        let b = DMatrix::from_fn(10, 2, |i, _| i as f64); // rank 1
        let f = DMatrix::from_fn(12, 2, |i, j| ((i + j) as f64).sin());
        assert!(matches!(canonical_normalization(&b, &f), Err(FopcaError::Rank(_))));
    }

    #[test]
    fn near_tie_flags_warning() {
        let n = 16;
        let t = 20;
        let q_b = orthonormal_columns(n, 2, 5);
        let q_f = orthonormal_columns(t, 2, 6);
        let b = q_b * (n as f64).sqrt(); // S_B = I => product eigenvalues both 1
        let f = q_f * (t as f64).sqrt();
        let rot = canonical_normalization(&b, &f).unwrap();
        assert!(rot.tie_warning);
    }
}
