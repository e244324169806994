//! Panel containers and column-centering primitives.
//!
//! A [`Panel`] is an `N x T` data matrix: rows index cross-section units,
//! columns index time periods. When the panel is synthetic the generating
//! low-rank structure is carried alongside it as a [`FactorStructure`].

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{FopcaError, Result};

/// An observed `N x T` data matrix with all entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    data: DMatrix<f64>,
}

impl Panel {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(FopcaError::Input("panel must have N >= 1 and T >= 1".into()));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(FopcaError::Input("panel contains non-finite entries".into()));
        }
        Ok(Panel { data })
    }

    pub fn n_rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.data.ncols()
    }

    /// Aspect ratio phi = N/T.
    pub fn aspect_ratio(&self) -> f64 {
        self.data.nrows() as f64 / self.data.ncols() as f64
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    /// Read a panel from CSV. Rows are units, columns are periods.
    /// When `has_header` is set the first line is skipped.
    pub fn read_csv(path: &Path, has_header: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_csv(&text, has_header)
    }

    pub fn parse_csv(text: &str, has_header: bool) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if lineno == 0 && has_header {
                continue;
            }
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|tok| {
                    tok.trim()
                        .parse::<f64>()
                        .map_err(|e| FopcaError::Parse(format!("line {}: {}", lineno + 1, e)))
                })
                .collect::<Result<_>>()?;
            if let Some(first) = rows.first() {
                if row.len() != first.len() {
                    return Err(FopcaError::Parse(format!(
                        "line {}: expected {} columns, found {}",
                        lineno + 1,
                        first.len(),
                        row.len()
                    )));
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(FopcaError::Input("empty CSV panel".into()));
        }
        let n = rows.len();
        let t = rows[0].len();
        Panel::new(DMatrix::from_fn(n, t, |i, j| rows[i][j]))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_matrix_csv(&mut out, &self.data)?;
        Ok(())
    }

    /// Binary round-trip format: little-endian u64 N, u64 T, then N*T f64
    /// entries in column-major order.
    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut buf8 = [0u8; 8];
        file.read_exact(&mut buf8)?;
        let n = u64::from_le_bytes(buf8) as usize;
        file.read_exact(&mut buf8)?;
        let t = u64::from_le_bytes(buf8) as usize;
        if n == 0 || t == 0 {
            return Err(FopcaError::Input("binary panel with zero dimension".into()));
        }
        let mut values = Vec::with_capacity(n * t);
        for _ in 0..n * t {
            file.read_exact(&mut buf8)?;
            values.push(f64::from_le_bytes(buf8));
        }
        Panel::new(DMatrix::from_column_slice(n, t, &values))
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(&(self.n_rows() as u64).to_le_bytes())?;
        out.write_all(&(self.n_cols() as u64).to_le_bytes())?;
        for x in self.data.iter() {
            out.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }
}

/// Write a matrix as CSV with shortest round-trip float formatting.
pub fn write_matrix_csv<W: Write>(out: &mut W, m: &DMatrix<f64>) -> std::io::Result<()> {
    for i in 0..m.nrows() {
        let mut line = String::new();
        for j in 0..m.ncols() {
            if j > 0 {
                line.push(',');
            }
            line.push_str(&format_f64(m[(i, j)]));
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// Shortest decimal representation that round-trips through f64.
pub fn format_f64(x: f64) -> String {
    let mut s = format!("{}", x);
    if s.parse::<f64>() != Ok(x) {
        s = format!("{:e}", x);
    }
    s
}

/// Known generating structure of a synthetic panel: `X = B F' + U`.
#[derive(Debug, Clone)]
pub struct FactorStructure {
    pub loadings: DMatrix<f64>,
    pub factors: DMatrix<f64>,
    pub rank: usize,
    pub noise: Option<DMatrix<f64>>,
}

impl FactorStructure {
    pub fn new(
        loadings: DMatrix<f64>,
        factors: DMatrix<f64>,
        noise: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        if loadings.ncols() != factors.ncols() {
            return Err(FopcaError::Dimension(format!(
                "loadings have {} columns but factors have {}",
                loadings.ncols(),
                factors.ncols()
            )));
        }
        let rank = loadings.ncols();
        if let Some(u) = &noise {
            if u.nrows() != loadings.nrows() || u.ncols() != factors.nrows() {
                return Err(FopcaError::Dimension("noise matrix shape mismatch".into()));
            }
        }
        Ok(FactorStructure { loadings, factors, rank, noise })
    }

    /// The low-rank signal M = B F'.
    pub fn signal(&self) -> DMatrix<f64> {
        &self.loadings * self.factors.transpose()
    }

    /// Signal strength nu_M = sqrt(lambda_r(B'B)), computed from the known B.
    /// Returns `None` when r = 0.
    pub fn signal_strength(&self) -> Option<f64> {
        if self.rank == 0 {
            return None;
        }
        let gram = self.loadings.transpose() * &self.loadings;
        let eig = gram.symmetric_eigen();
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        Some(min.max(0.0).sqrt())
    }
}

/// Subtract the column mean from every column: `(I - P_{1_T}) A`.
pub fn demean_columns(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() < 2 {
        return Err(FopcaError::Input("demeaning requires at least 2 rows".into()));
    }
    let t = a.nrows() as f64;
    let mut out = a.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.iter().sum::<f64>() / t;
        for x in col.iter_mut() {
            *x -= mean;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn demean_simple_column() {
        let a = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let d = demean_columns(&a).unwrap();
        assert_eq!(d.as_slice(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn demean_idempotent_on_centered() {
        let a = DMatrix::from_column_slice(4, 1, &[-1.5, 0.5, 0.5, 0.5]);
        let d = demean_columns(&a).unwrap();
        assert_abs_diff_eq!(d, a, epsilon = 1e-15);
    }

    #[test]
    fn demean_matches_naive_loop_oracle() {
        // seeded 10x2 filled deterministically
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let a = DMatrix::from_fn(10, 2, |_, _| next() * 7.0);
        let d = demean_columns(&a).unwrap();
        // naive mean oracle
        for j in 0..2 {
            let mut mean = 0.0;
            for i in 0..10 {
                mean += a[(i, j)];
            }
            mean /= 10.0;
            for i in 0..10 {
                assert_abs_diff_eq!(d[(i, j)], a[(i, j)] - mean, epsilon = 1e-14);
            }
            let col_sum: f64 = (0..10).map(|i| d[(i, j)]).sum();
            assert!(col_sum.abs() < 1e-12 * 10.0 * a.amax());
        }
    }

    #[test]
    fn demean_rejects_single_row() {
        let a = DMatrix::from_column_slice(1, 1, &[1.0]);
        assert!(demean_columns(&a).is_err());
    }

    #[test]
    fn panel_rejects_non_finite() {
        let m = DMatrix::from_column_slice(2, 2, &[1.0, f64::NAN, 0.0, 1.0]);
        assert!(Panel::new(m).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let m = DMatrix::from_column_slice(2, 3, &[1.0, -2.5, 0.125, 4.0, 1e-9, 7.0]);
        let panel = Panel::new(m).unwrap();
        let dir = std::env::temp_dir().join("fopca_panel_csv_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("p.csv");
        panel.write_csv(&path).unwrap();
        let back = Panel::read_csv(&path, false).unwrap();
        assert_eq!(panel, back);
    }

    #[test]
    fn binary_round_trip() {
        let m = DMatrix::from_fn(3, 5, |i, j| (i as f64 + 1.0) * (j as f64 - 2.0) / 3.0);
        let panel = Panel::new(m).unwrap();
        let dir = std::env::temp_dir().join("fopca_panel_bin_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("p.bin");
        panel.write_binary(&path).unwrap();
        let back = Panel::read_binary(&path).unwrap();
        assert_eq!(panel, back);
    }

    #[test]
    fn reconstruction_from_factor_structure() {
        let b = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let f = DMatrix::from_column_slice(4, 1, &[1.0, -1.0, 0.5, 2.0]);
        let u = DMatrix::zeros(3, 4);
        let fs = FactorStructure::new(b.clone(), f.clone(), Some(u)).unwrap();
        let x = fs.signal() + fs.noise.as_ref().unwrap();
        assert_abs_diff_eq!(x, b * f.transpose(), epsilon = 1e-15);
    }
}
