//! Factor-augmented treatment-effect estimation.
//!
//! Residualizes outcome, treatment, and instrument on `[1_T, F_hat]`, forms
//! the just-identified IV slope `beta_hat = (eps_z' eps_g)^{-1} eps_z' eps_y`,
//! and reports an HC0 sandwich standard error on the sqrt(T) scale. OLS is
//! the special case z = g.

use nalgebra::{DMatrix, DVector};

use crate::error::{FopcaError, Result};
use crate::panel::Panel;
use crate::pca;

/// Threshold on |gamma_hat| below which the instrument is declared weak.
pub const WEAK_INSTRUMENT_TOL: f64 = 1e-10;

/// Relative column-norm threshold for dropping collinear projection columns.
const COLLINEAR_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct RegressionData {
    pub y: Vec<f64>,
    pub g: Vec<f64>,
    pub z: Vec<f64>,
    pub panel: Panel,
}

impl RegressionData {
    /// IV mode: explicit instrument.
    pub fn new_iv(y: Vec<f64>, g: Vec<f64>, z: Vec<f64>, panel: Panel) -> Result<Self> {
        let t = panel.n_cols();
        for (name, v) in [("y", &y), ("g", &g), ("z", &z)] {
            if v.len() != t {
                return Err(FopcaError::Dimension(format!(
                    "{} has length {}, expected T = {}",
                    name,
                    v.len(),
                    t
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(FopcaError::Input(format!("{} contains a non-finite entry", name)));
            }
        }
        Ok(RegressionData { y, g, z, panel })
    }

    /// OLS mode: the treatment instruments itself.
    pub fn new_ols(y: Vec<f64>, g: Vec<f64>, panel: Panel) -> Result<Self> {
        let z = g.clone();
        RegressionData::new_iv(y, g, z, panel)
    }
}

#[derive(Debug, Clone)]
pub struct InferenceResult {
    pub beta_hat: f64,
    /// HC0 sigma_hat on the sqrt(T) scale; zero when residual variance is
    /// degenerate (then a warning is attached).
    pub sigma_hat: f64,
    /// sqrt(T) * beta_hat / sigma_hat (null beta = 0); zero when sigma_hat = 0.
    pub t_stat: f64,
    /// Residualized first-stage Wald statistic of g on z; infinite when the
    /// first stage fits exactly (OLS mode).
    pub first_stage_t: f64,
    pub r_used: usize,
    /// eps_z' eps_g / T.
    pub gamma_hat: f64,
    pub warnings: Vec<String>,
}

impl InferenceResult {
    /// Simulation convention: sqrt(T) * (beta_hat - beta) / sigma_hat.
    pub fn t_stat_centered(&self, beta: f64, t: usize) -> f64 {
        if self.sigma_hat == 0.0 {
            return 0.0;
        }
        (t as f64).sqrt() * (self.beta_hat - beta) / self.sigma_hat
    }
}

/// Orthonormal basis of span{1_T, columns of f_hat}, via modified
/// Gram-Schmidt. Collinear columns are dropped with a warning.
fn projection_basis(t: usize, f_hat: Option<&DMatrix<f64>>) -> Result<(Vec<DVector<f64>>, Vec<String>)> {
    let r = f_hat.map_or(0, |f| f.ncols());
    if r + 1 >= t {
        return Err(FopcaError::DegreesOfFreedom(format!(
            "R + 1 = {} regressors with only T = {} observations",
            r + 1,
            t
        )));
    }
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(r + 1);
    let mut warnings = Vec::new();
    let ones = DVector::from_element(t, 1.0 / (t as f64).sqrt());
    basis.push(ones);
    if let Some(f) = f_hat {
        for j in 0..r {
            let mut v: DVector<f64> = f.column(j).into();
            let orig = v.norm();
            for q in &basis {
                let c = q.dot(&v);
                v -= q * c;
            }
            // second pass for numerical orthogonality
            for q in &basis {
                let c = q.dot(&v);
                v -= q * c;
            }
            let norm = v.norm();
            if norm <= COLLINEAR_TOL * orig.max(1.0) {
                warnings.push(format!("dropped collinear factor column {}", j));
            } else {
                basis.push(v / norm);
            }
        }
    }
    Ok((basis, warnings))
}

fn project_out(a: &[f64], basis: &[DVector<f64>]) -> Vec<f64> {
    let mut v = DVector::from_column_slice(a);
    for q in basis {
        let c = q.dot(&v);
        v -= q * c;
    }
    v.iter().copied().collect()
}

/// Residuals of `a` after projecting out the constant and the columns of
/// `f_hat`. With R = 0 this is plain demeaning.
pub fn residualize(a: &[f64], f_hat: Option<&DMatrix<f64>>) -> Result<Vec<f64>> {
    let t = a.len();
    if let Some(f) = f_hat {
        if f.nrows() != t {
            return Err(FopcaError::Dimension(format!(
                "f_hat has {} rows, expected {}",
                f.nrows(),
                t
            )));
        }
    }
    let (basis, _) = projection_basis(t, f_hat)?;
    Ok(project_out(a, &basis))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// HC0 sandwich sigma_hat:
/// sigma^2 = (eps_z'eps_g/T)^{-2} * T^{-1} sum_t eps_{z,t}^2 eta_t^2.
pub fn hc0_sandwich(eps_z: &[f64], eps_g: &[f64], eta_hat: &[f64]) -> Result<f64> {
    let t = eps_z.len() as f64;
    let bread = dot(eps_z, eps_g) / t;
    if bread == 0.0 {
        return Err(FopcaError::Singularity("zero bread term eps_z'eps_g".into()));
    }
    let meat = eps_z.iter().zip(eta_hat).map(|(z, e)| z * z * e * e).sum::<f64>() / t;
    Ok((meat / (bread * bread)).sqrt())
}

/// Just-identified IV (or OLS when z = g) with R estimated factors as
/// controls. R = 0 projects on the intercept only.
pub fn iv_estimate(data: &RegressionData, r: usize) -> Result<InferenceResult> {
    let n = data.panel.n_rows();
    let t = data.panel.n_cols();
    if r + 2 > n.min(t) {
        return Err(FopcaError::Dimension(format!(
            "R = {} exceeds min(N, T) - 2 = {}",
            r,
            n.min(t).saturating_sub(2)
        )));
    }
    let f_hat = if r > 0 { Some(pca::fit(&data.panel, r)?.f_hat) } else { None };
    estimate_given_factors(&data.y, &data.g, &data.z, f_hat.as_ref(), r)
}

/// Same estimator with the factor columns already extracted; used by the
/// replication driver, which shares one SVD across a grid of working
/// dimensions.
pub fn estimate_given_factors(
    y: &[f64],
    g: &[f64],
    z: &[f64],
    f_hat: Option<&DMatrix<f64>>,
    r: usize,
) -> Result<InferenceResult> {
    let t = y.len();
    let (basis, mut warnings) = projection_basis(t, f_hat)?;
    let eps_y = project_out(y, &basis);
    let eps_g = project_out(g, &basis);
    let eps_z = project_out(z, &basis);

    let tf = t as f64;
    let gamma_hat = dot(&eps_z, &eps_g) / tf;

    // first-stage residualized Wald statistic of g on z
    let zz = dot(&eps_z, &eps_z);
    let first_stage_t = if zz > 0.0 {
        let c = dot(&eps_z, &eps_g) / zz;
        let resid: Vec<f64> = eps_g.iter().zip(&eps_z).map(|(g, z)| g - c * z).collect();
        match hc0_sandwich(&eps_z, &eps_z, &resid) {
            Ok(s) if s > 0.0 => tf.sqrt() * c / s,
            _ => f64::INFINITY * c.signum(),
        }
    } else {
        0.0
    };

    if gamma_hat.abs() < WEAK_INSTRUMENT_TOL {
        return Err(FopcaError::WeakInstrument { gamma_hat, first_stage_t });
    }

    let beta_hat = dot(&eps_z, &eps_y) / dot(&eps_z, &eps_g);
    let mut eta_hat: Vec<f64> = eps_y.iter().zip(&eps_g).map(|(y, g)| y - beta_hat * g).collect();
    // exact-fit detection: residuals below round-off scale are treated as zero
    let eta_norm = eta_hat.iter().map(|x| x * x).sum::<f64>().sqrt();
    let fit_scale = dot(&eps_y, &eps_y).sqrt() + beta_hat.abs() * dot(&eps_g, &eps_g).sqrt();
    if eta_norm <= 1e-10 * fit_scale.max(f64::MIN_POSITIVE) {
        eta_hat.iter_mut().for_each(|x| *x = 0.0);
    }
    let sigma_hat = match hc0_sandwich(&eps_z, &eps_g, &eta_hat) {
        Ok(s) => s,
        Err(FopcaError::Singularity(msg)) => return Err(FopcaError::Singularity(msg)),
        Err(e) => return Err(e),
    };
    if sigma_hat == 0.0 {
        warnings.push("degenerate residual variance: eta_hat is identically zero".into());
    }
    let t_stat = if sigma_hat > 0.0 { tf.sqrt() * beta_hat / sigma_hat } else { 0.0 };

    Ok(InferenceResult { beta_hat, sigma_hat, t_stat, first_stage_t, r_used: r, gamma_hat, warnings })
}
