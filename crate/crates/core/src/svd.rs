//! Truncated SVD with a deterministic sign convention.

use nalgebra::DMatrix;

use crate::error::{FopcaError, Result};
use crate::panel::Panel;

/// Singular values below `RANK_TOL * lambda_1` are treated as zero.
pub const RANK_TOL: f64 = 1e-12;

/// Top-k singular triple of a matrix.
///
/// Columns of `left` and `right` are orthonormal and `singular_values` is
/// nonincreasing. The entry of largest absolute value in each left singular
/// vector is positive, which pins the sign of the pair.
#[derive(Debug, Clone)]
pub struct SvdTriple {
    pub left: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub right: DMatrix<f64>,
}

impl SvdTriple {
    pub fn k(&self) -> usize {
        self.singular_values.len()
    }

    /// Rank-k reconstruction `left * diag(s) * right'`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut scaled = self.left.clone();
        for (j, s) in self.singular_values.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*s);
        }
        scaled * self.right.transpose()
    }
}

/// Full set of singular values of a dense matrix, nonincreasing.
pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    let mut sv: Vec<f64> = a.clone().svd(false, false).singular_values.iter().cloned().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

/// Top-k singular triple of a panel under the sign convention.
pub fn svd_top(x: &Panel, k: usize) -> Result<SvdTriple> {
    svd_top_matrix(x.data(), k)
}

pub fn svd_top_matrix(a: &DMatrix<f64>, k: usize) -> Result<SvdTriple> {
    let (n, t) = (a.nrows(), a.ncols());
    if k == 0 || k > n.min(t) {
        return Err(FopcaError::Dimension(format!(
            "k = {} out of range 1..={} for a {}x{} matrix",
            k,
            n.min(t),
            n,
            t
        )));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(FopcaError::Input("matrix contains non-finite entries".into()));
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.ok_or_else(|| FopcaError::Numeric("SVD failed to produce U".into()))?;
    let vt = svd.v_t.ok_or_else(|| FopcaError::Numeric("SVD failed to produce V'".into()))?;
    let m = svd.singular_values.len();

    // nalgebra sorts singular values in decreasing order already, but we
    // re-sort defensively so the contract does not depend on the backend.
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].partial_cmp(&svd.singular_values[i]).unwrap());

    let mut left = DMatrix::zeros(n, k);
    let mut right = DMatrix::zeros(t, k);
    let mut values = Vec::with_capacity(k);
    for (out_j, &src_j) in order.iter().take(k).enumerate() {
        values.push(svd.singular_values[src_j]);
        left.column_mut(out_j).copy_from(&u.column(src_j));
        right.column_mut(out_j).copy_from(&vt.row(src_j).transpose());
    }

    // The bidiagonalization backend loses accuracy on (near-)rank-deficient
    // inputs; verify the column residuals A v_j = s_j u_j and fall back to a
    // one-sided Jacobi decomposition when they are off.
    if !top_columns_accurate(a, &left, &values, &right) {
        let (ju, js, jv) = jacobi_svd_full(a);
        for out_j in 0..k {
            values[out_j] = js[out_j];
            left.column_mut(out_j).copy_from(&ju.column(out_j));
            right.column_mut(out_j).copy_from(&jv.column(out_j));
        }
    }

    apply_sign_convention(&mut left, &mut right);
    Ok(SvdTriple { left, singular_values: values, right })
}

fn top_columns_accurate(
    a: &DMatrix<f64>,
    left: &DMatrix<f64>,
    values: &[f64],
    right: &DMatrix<f64>,
) -> bool {
    let s1 = values.first().copied().unwrap_or(0.0);
    if s1 == 0.0 {
        return true;
    }
    let tol = 1e-10 * s1;
    for j in 0..values.len() {
        let av = a * right.column(j);
        let res = (&av - left.column(j) * values[j]).norm();
        if res > tol {
            return false;
        }
    }
    true
}

/// One-sided Jacobi SVD of a full matrix; slow but accurate on degenerate
/// spectra. Returns (U, s, V) with s nonincreasing of length min(n, t);
/// U columns for numerically zero singular values are completed to an
/// orthonormal set from canonical basis vectors.
fn jacobi_svd_full(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    if a.nrows() < a.ncols() {
        let (u, s, v) = jacobi_svd_tall(&a.transpose());
        return (v, s, u);
    }
    jacobi_svd_tall(a)
}

fn jacobi_svd_tall(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let (n, t) = (a.nrows(), a.ncols());
    let mut w = a.clone(); // columns converge to u_j * s_j
    let mut v = DMatrix::<f64>::identity(t, t);
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..t {
            for q in (p + 1)..t {
                let alpha: f64 = w.column(p).dot(&w.column(p));
                let beta: f64 = w.column(q).dot(&w.column(q));
                let gamma: f64 = w.column(p).dot(&w.column(q));
                off = off.max(gamma.abs() / (alpha * beta).sqrt().max(1e-300));
                // <= so that a pair of exactly-zero columns (gamma = alpha =
                // beta = 0) is skipped instead of producing a 0/0 rotation
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let tan = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cos = 1.0 / (1.0 + tan * tan).sqrt();
                let sin = cos * tan;
                for i in 0..n {
                    let wp = w[(i, p)];
                    let wq = w[(i, q)];
                    w[(i, p)] = cos * wp - sin * wq;
                    w[(i, q)] = sin * wp + cos * wq;
                }
                for i in 0..t {
                    let vp = v[(i, p)];
                    let vq = v[(i, q)];
                    v[(i, p)] = cos * vp - sin * vq;
                    v[(i, q)] = sin * vp + cos * vq;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut entries: Vec<(f64, usize)> = (0..t).map(|j| (w.column(j).norm(), j)).collect();
    entries.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let s1 = entries.first().map(|e| e.0).unwrap_or(0.0);
    let mut u = DMatrix::zeros(n, t);
    let mut vv = DMatrix::zeros(t, t);
    let mut s = Vec::with_capacity(t);
    let mut null_cols = Vec::new();
    for (out_j, (norm, j)) in entries.into_iter().enumerate() {
        s.push(norm);
        if norm > RANK_TOL * s1.max(1e-300) {
            u.column_mut(out_j).copy_from(&(w.column(j) / norm));
        } else {
            null_cols.push(out_j);
        }
        vv.column_mut(out_j).copy_from(&v.column(j));
    }
    // complete the numerically null left columns deterministically
    let mut cand = 0usize;
    for out_j in null_cols {
        loop {
            let mut e = nalgebra::DVector::zeros(n);
            e[cand % n] = 1.0;
            cand += 1;
            for j in 0..t {
                if j == out_j {
                    continue;
                }
                let c = u.column(j).dot(&e);
                e -= u.column(j) * c;
            }
            let norm = e.norm();
            if norm > 1e-6 {
                u.column_mut(out_j).copy_from(&(e / norm));
                break;
            }
        }
    }
    (u, s, vv)
}

/// Flip column pairs so the entry of largest absolute value in each left
/// singular vector is positive. Ties on |entry| resolve to the lowest index.
pub fn apply_sign_convention(left: &mut DMatrix<f64>, right: &mut DMatrix<f64>) {
    for j in 0..left.ncols() {
        let mut best_idx = 0;
        let mut best_abs = -1.0;
        for (i, x) in left.column(j).iter().enumerate() {
            if x.abs() > best_abs {
                best_abs = x.abs();
                best_idx = i;
            }
        }
        if left[(best_idx, j)] < 0.0 {
            left.column_mut(j).neg_mut();
            if j < right.ncols() {
                right.column_mut(j).neg_mut();
            }
        }
    }
}

/// Moore-Penrose pseudo-inverse via the SVD, with the shared rank tolerance.
pub fn pseudo_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = a.clone().svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let cutoff = RANK_TOL * smax;
    let mut sinv = DMatrix::zeros(svd.singular_values.len(), svd.singular_values.len());
    for (i, s) in svd.singular_values.iter().enumerate() {
        if *s > cutoff {
            sinv[(i, i)] = 1.0 / s;
        }
    }
    vt.transpose() * sinv * u.transpose()
}
