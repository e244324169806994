//! Deformed Marchenko-Pastur law.
//!
//! For a discrete population spectral measure pi = sum w_i delta_{s_i} and
//! aspect ratio phi = N/T, the Stieltjes transform of the limiting noise
//! spectrum solves
//!
//!   1/m = -z + phi * sum_i w_i s_i / (1 + m s_i),
//!
//! equivalently z = f(m) with f(x) = -1/x + sum_i r_i / (x + 1/s_i) and
//! r_i = phi w_i. Support edges are the critical values of f; the density is
//! recovered from the boundary values of m on the real axis.
//!
//! The solver works on the eigenvalue (covariance) scale; singular-value
//! scale quantities are exposed through explicit square-root adapters.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{FopcaError, Result};

/// Discrete population spectral measure: atoms (s_i, w_i) with s_1 > s_2 > ...
/// and weights summing to one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralMeasure {
    atoms: Vec<(f64, f64)>,
}

impl SpectralMeasure {
    pub fn new(mut atoms: Vec<(f64, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(FopcaError::Input("spectral measure needs at least one atom".into()));
        }
        atoms.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        for w in atoms.windows(2) {
            if w[0].0 <= w[1].0 {
                return Err(FopcaError::Input("atom locations must be distinct".into()));
            }
        }
        let mut total = 0.0;
        for &(s, w) in &atoms {
            if !(s > 0.0) || !(w > 0.0) || w > 1.0 {
                return Err(FopcaError::Input(format!("invalid atom (s={}, w={})", s, w)));
            }
            total += w;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(FopcaError::Input(format!("weights sum to {}, expected 1", total)));
        }
        Ok(SpectralMeasure { atoms })
    }

    pub fn single(s: f64) -> Self {
        SpectralMeasure::new(vec![(s, 1.0)]).expect("single atom is always valid")
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        SpectralMeasure::new(self.atoms.iter().map(|&(s, w)| (c * s, w)).collect())
    }
}

/// Solved deformed MP law.
#[derive(Debug, Clone)]
pub struct MpLaw {
    pub measure: SpectralMeasure,
    pub phi: f64,
    /// x_1 >= ... >= x_{2p-1} (in I_1..I_n), then x_{2p} (the I_0 point).
    pub critical_points: Vec<f64>,
    /// a_k = f(x_k), nonincreasing.
    pub edges: Vec<f64>,
    /// Bulk components [a_{2k}, a_{2k-1}], highest first.
    pub bulks: Vec<(f64, f64)>,
    /// Critical points where f'' nearly vanishes (each counted twice).
    pub degenerate: Vec<bool>,
    /// Default spectral parameter for density evaluation: 1e-6 * a_1.
    pub eta_default: f64,
}

/// Per-edge and per-bulk regularity verdicts.
#[derive(Debug, Clone, Serialize)]
pub struct RegularityReport {
    pub delta: f64,
    pub delta_prime: f64,
    pub edge_verdicts: Vec<EdgeVerdict>,
    pub bulk_verdicts: Vec<BulkVerdict>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EdgeVerdict {
    pub edge: f64,
    pub above_delta: bool,
    pub separated: bool,
    pub away_from_poles: bool,
    pub regular: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BulkVerdict {
    pub lo: f64,
    pub hi: f64,
    pub min_density: f64,
    pub threshold: f64,
    pub regular: bool,
}

const POLE_TOL: f64 = 1e-13;

fn check_pole(measure: &SpectralMeasure, x: f64) -> Result<()> {
    if x.abs() < POLE_TOL {
        return Err(FopcaError::Pole(x));
    }
    for &(s, _) in measure.atoms() {
        if (x + 1.0 / s).abs() < POLE_TOL * (1.0 + 1.0 / s) {
            return Err(FopcaError::Pole(x));
        }
    }
    Ok(())
}

/// f(x) = -1/x + sum_i r_i / (x + 1/s_i), r_i = phi w_i.
pub fn evaluate_f(measure: &SpectralMeasure, phi: f64, x: f64) -> Result<f64> {
    check_pole(measure, x)?;
    let mut acc = -1.0 / x;
    for &(s, w) in measure.atoms() {
        acc += phi * w / (x + 1.0 / s);
    }
    Ok(acc)
}

/// Analytic derivative f'(x) = 1/x^2 - sum_i r_i / (x + 1/s_i)^2.
pub fn evaluate_f_prime(measure: &SpectralMeasure, phi: f64, x: f64) -> Result<f64> {
    check_pole(measure, x)?;
    let mut acc = 1.0 / (x * x);
    for &(s, w) in measure.atoms() {
        let d = x + 1.0 / s;
        acc -= phi * w / (d * d);
    }
    Ok(acc)
}

/// Analytic second derivative f''(x) = -2/x^3 + 2 sum_i r_i / (x + 1/s_i)^3.
pub fn evaluate_f_second(measure: &SpectralMeasure, phi: f64, x: f64) -> Result<f64> {
    check_pole(measure, x)?;
    let mut acc = -2.0 / (x * x * x);
    for &(s, w) in measure.atoms() {
        let d = x + 1.0 / s;
        acc += 2.0 * phi * w / (d * d * d);
    }
    Ok(acc)
}

/// Magnitude scale of the terms entering f'' at x, used to decide whether a
/// computed f'' value is "numerically zero" (degenerate critical point).
fn f_second_scale(measure: &SpectralMeasure, phi: f64, x: f64) -> f64 {
    let mut acc = 2.0 / x.abs().powi(3);
    for &(s, w) in measure.atoms() {
        let d = (x + 1.0 / s).abs();
        acc += 2.0 * phi * w / d.powi(3);
    }
    acc
}

fn bisect_root(measure: &SpectralMeasure, phi: f64, mut lo: f64, mut hi: f64) -> f64 {
    let mut f_lo = evaluate_f_prime(measure, phi, lo).unwrap();
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let f_mid = match evaluate_f_prime(measure, phi, mid) {
            Ok(v) => v,
            Err(_) => break,
        };
        if f_mid == 0.0 {
            return mid;
        }
        if (f_lo > 0.0) == (f_mid > 0.0) {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
        if (hi - lo).abs() <= 1e-15 * (1.0 + mid.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Sample points of a bounded open interval, clustered geometrically toward
/// both endpoints where f' has poles.
fn interior_samples(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let width = hi - lo;
    let mut pts = Vec::with_capacity(2 * n);
    // geometric approach from each endpoint down to 1e-12 of the width
    for j in 0..n {
        let frac = 0.5 * 1e-12f64.powf(1.0 - j as f64 / (n - 1) as f64);
        pts.push(lo + frac * width);
        pts.push(hi - frac * width);
    }
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    pts
}

fn sign_change_roots(measure: &SpectralMeasure, phi: f64, samples: &[f64]) -> Vec<f64> {
    let mut roots = Vec::new();
    let mut prev: Option<(f64, f64)> = None;
    for &x in samples {
        let v = match evaluate_f_prime(measure, phi, x) {
            Ok(v) => v,
            Err(_) => continue,
        };
        if let Some((px, pv)) = prev {
            if (pv > 0.0) != (v > 0.0) {
                roots.push(bisect_root(measure, phi, px, x));
            }
        }
        prev = Some((x, v));
    }
    roots
}

/// Golden-section maximum of f' over the sampled grid (interior intervals).
fn grid_maximum(measure: &SpectralMeasure, phi: f64, samples: &[f64]) -> (f64, f64) {
    let mut best = (samples[0], f64::NEG_INFINITY);
    for &x in samples {
        if let Ok(v) = evaluate_f_prime(measure, phi, x) {
            if v > best.1 {
                best = (x, v);
            }
        }
    }
    best
}

/// Solve the deformed MP law for a measure and aspect ratio.
pub fn solve_law(measure: &SpectralMeasure, phi: f64) -> Result<MpLaw> {
    if !(phi > 0.0) {
        return Err(FopcaError::Input(format!("phi must be positive, got {}", phi)));
    }
    if (phi - 1.0).abs() < 1e-12 {
        return Err(FopcaError::UnsupportedRegime(
            "phi = 1 is not supported: the incoherence theory requires N/T bounded away from 1"
                .into(),
        ));
    }
    let atoms = measure.atoms();
    let n_atoms = atoms.len();
    let s_max = atoms[0].0;
    let s_min = atoms[n_atoms - 1].0;
    let grid = 800;

    // critical points in I_1 = (-1/s_1, 0) and interior I_i, collected in
    // descending x order
    let mut inner: Vec<(f64, bool)> = Vec::new(); // (x, degenerate)

    let i1 = interior_samples(-1.0 / s_max, 0.0, grid);
    let roots = sign_change_roots(measure, phi, &i1);
    if roots.len() != 1 {
        return Err(FopcaError::Numeric(format!(
            "expected exactly one critical point in I_1, found {}",
            roots.len()
        )));
    }
    inner.push((roots[0], false));

    for i in 1..n_atoms {
        let lo = -1.0 / atoms[i].0;
        let hi = -1.0 / atoms[i - 1].0;
        let samples = interior_samples(lo, hi, grid);
        let mut roots = sign_change_roots(measure, phi, &samples);
        if roots.is_empty() {
            // possible tangency: maximum of f' touching zero
            let (x_max, v_max) = grid_maximum(measure, phi, &samples);
            let scale = f_second_scale(measure, phi, x_max) * (hi - lo).powi(2);
            if v_max.abs() < 1e-8 * scale.max(1e-300) {
                inner.push((x_max, true));
                inner.push((x_max, true));
            }
        } else {
            if roots.len() % 2 != 0 {
                return Err(FopcaError::Numeric(format!(
                    "odd critical-point count {} in interval ({:.6}, {:.6})",
                    roots.len(),
                    lo,
                    hi
                )));
            }
            roots.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for x in roots {
                inner.push((x, false));
            }
        }
    }
    inner.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    // the unique critical point in I_0
    let x0 = if phi > 1.0 {
        // (0, infinity): f' -> +inf at 0+, ~ (1-phi)/x^2 < 0 at infinity
        let samples: Vec<f64> =
            (0..2000).map(|j| 1e-9 / s_max * (1e21f64).powf(j as f64 / 1999.0)).collect();
        let roots = sign_change_roots(measure, phi, &samples);
        if roots.len() != 1 {
            return Err(FopcaError::Numeric(format!(
                "expected one critical point in (0, inf), found {}",
                roots.len()
            )));
        }
        roots[0]
    } else {
        // (-inf, -1/s_n): f' ~ (1-phi)/x^2 > 0 at -inf, -> -inf at the pole
        let samples: Vec<f64> = (0..2000)
            .map(|j| -1.0 / s_min - 1e-9 / s_min * (1e21f64).powf(j as f64 / 1999.0))
            .collect();
        let mut s = samples;
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let roots = sign_change_roots(measure, phi, &s);
        if roots.len() != 1 {
            return Err(FopcaError::Numeric(format!(
                "expected one critical point in (-inf, -1/s_n), found {}",
                roots.len()
            )));
        }
        roots[0]
    };

    let mut critical_points: Vec<f64> = inner.iter().map(|&(x, _)| x).collect();
    let mut degenerate: Vec<bool> = inner.iter().map(|&(_, d)| d).collect();
    critical_points.push(x0);
    degenerate.push(false);

    if critical_points.len() % 2 != 0 {
        return Err(FopcaError::Numeric(format!(
            "critical point count {} is odd",
            critical_points.len()
        )));
    }

    let edges: Vec<f64> = critical_points
        .iter()
        .map(|&x| evaluate_f(measure, phi, x))
        .collect::<Result<_>>()?;
    for w in edges.windows(2) {
        if w[0] < w[1] - 1e-9 * (1.0 + w[0].abs()) {
            return Err(FopcaError::Numeric("edges are not nonincreasing".into()));
        }
    }
    let p = edges.len() / 2;
    let bulks: Vec<(f64, f64)> =
        (0..p).map(|k| (edges[2 * k + 1].max(0.0), edges[2 * k])).collect();

    let eta_default = 1e-6 * edges[0];
    Ok(MpLaw { measure: measure.clone(), phi, critical_points, edges, bulks, degenerate, eta_default })
}

impl MpLaw {
    /// Number of bulk components.
    pub fn n_bulks(&self) -> usize {
        self.bulks.len()
    }

    /// Edges on the singular-value scale (square roots of the covariance
    /// eigenvalue edges).
    pub fn edges_singular_scale(&self) -> Vec<f64> {
        self.edges.iter().map(|a| a.max(0.0).sqrt()).collect()
    }

    /// Stieltjes transform of the companion law at z in the upper half-plane,
    /// by damped fixed-point iteration (omega = 0.5, tolerance 1e-12).
    pub fn stieltjes(&self, z: Complex64) -> Result<Complex64> {
        stieltjes_fixed_point(&self.measure, self.phi, z, None)
    }

    fn stieltjes_warm(&self, z: Complex64, warm: Option<Complex64>) -> Result<Complex64> {
        stieltjes_fixed_point(&self.measure, self.phi, z, warm)
    }
}

fn fixed_point_map(measure: &SpectralMeasure, phi: f64, z: Complex64, m: Complex64) -> Complex64 {
    let mut denom = -z;
    for &(s, w) in measure.atoms() {
        denom += phi * w * s / (1.0 + m * s);
    }
    1.0 / denom
}

/// Newton polish of the self-consistent equation m * D(m) = 1 with
/// D(m) = -z + phi * sum w s / (1 + m s); returns the root only when it lies
/// in the closed upper half-plane and satisfies the fixed-point tolerance.
fn newton_polish(
    measure: &SpectralMeasure,
    phi: f64,
    z: Complex64,
    m0: Complex64,
) -> Option<Complex64> {
    let mut m = m0;
    for _ in 0..100 {
        let mut d = -z;
        let mut dp = Complex64::new(0.0, 0.0);
        for &(s, w) in measure.atoms() {
            let q = 1.0 + m * s;
            d += phi * w * s / q;
            dp -= phi * w * s * s / (q * q);
        }
        let g = m * d - 1.0;
        let gp = d + m * dp;
        if gp.norm() == 0.0 {
            return None;
        }
        let step = g / gp;
        m -= step;
        if !m.re.is_finite() || !m.im.is_finite() {
            return None;
        }
        if step.norm() < 1e-14 * m.norm().max(1e-300) {
            let next = fixed_point_map(measure, phi, z, m);
            if (next - m).norm() < 1e-12 && m.im >= -1e-12 {
                return Some(Complex64::new(m.re, m.im.max(1e-300)));
            }
            return None;
        }
    }
    None
}

fn stieltjes_fixed_point(
    measure: &SpectralMeasure,
    phi: f64,
    z: Complex64,
    warm: Option<Complex64>,
) -> Result<Complex64> {
    let omega = 0.5;
    let mut m = warm.unwrap_or_else(|| Complex64::new(0.0, 1.0 / z.norm()));
    if m.im <= 0.0 {
        m = Complex64::new(m.re, 1.0 / z.norm());
    }
    if warm.is_some() {
        // a neighboring solution is an excellent Newton starting point
        if let Some(root) = newton_polish(measure, phi, z, m) {
            return Ok(root);
        }
    }
    let mut residual = f64::INFINITY;
    for it in 0..10_000 {
        let next = fixed_point_map(measure, phi, z, m);
        residual = (next - m).norm();
        m = (1.0 - omega) * m + omega * next;
        if m.im < 0.0 {
            m = Complex64::new(m.re, 1e-300);
        }
        if residual < 1e-12 {
            return Ok(m);
        }
        // the damped map contracts slowly near bulk edges; switch to Newton
        // once the iterate is in the attraction basin
        if it % 100 == 50 {
            if let Some(root) = newton_polish(measure, phi, z, m) {
                return Ok(root);
            }
        }
    }
    Err(FopcaError::Numeric(format!(
        "Stieltjes fixed point did not converge at z = {} (last residual {:.3e})",
        z, residual
    )))
}

/// Eigenvalue-scale spectral density at x, regularized at height eta:
/// Im m(x + i eta) / (pi phi), which integrates to min(1, 1/phi) over the
/// bulks and matches the classical MP density in the single-atom case.
pub fn density(law: &MpLaw, x: f64, eta: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(FopcaError::Input("eta must be positive".into()));
    }
    let m = law.stieltjes(Complex64::new(x, eta))?;
    // subtract the regularized zero-atom contribution of the companion law
    // so off-support values decay to zero with eta
    let rho = m.im / (std::f64::consts::PI * law.phi);
    Ok(rho.max(-1e-12))
}

/// Density over a grid with warm-started fixed-point solves.
pub fn density_grid(law: &MpLaw, xs: &[f64], eta: f64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(xs.len());
    let mut warm: Option<Complex64> = None;
    for &x in xs {
        let m = law.stieltjes_warm(Complex64::new(x, eta), warm)?;
        warm = Some(m);
        out.push((m.im / (std::f64::consts::PI * law.phi)).max(-1e-12));
    }
    Ok(out)
}

/// Cumulative tail mass table over one bulk, via the edge-regularizing
/// substitution x = c - h cos(theta).
struct BulkTable {
    thetas: Vec<f64>,
    xs: Vec<f64>,
    /// tail[i] = integral of density from xs[i] to the upper edge
    tail: Vec<f64>,
    total: f64,
}

fn bulk_table(law: &MpLaw, lo: f64, hi: f64, nodes: usize, eta: f64) -> Result<BulkTable> {
    let c = 0.5 * (lo + hi);
    let h = 0.5 * (hi - lo);
    let n = nodes;
    let thetas: Vec<f64> = (0..=n).map(|j| std::f64::consts::PI * j as f64 / n as f64).collect();
    let xs: Vec<f64> = thetas.iter().map(|&t| c - h * t.cos()).collect();
    let dens = density_grid(law, &xs, eta)?;
    // integrand in theta: rho(x(theta)) * h * sin(theta)
    let g: Vec<f64> = thetas
        .iter()
        .zip(&dens)
        .map(|(&t, &d)| d.max(0.0) * h * t.sin())
        .collect();
    let dt = std::f64::consts::PI / n as f64;
    // cumulative from the top edge (theta = pi) downwards, trapezoid
    let mut tail = vec![0.0; n + 1];
    for i in (0..n).rev() {
        tail[i] = tail[i + 1] + 0.5 * (g[i] + g[i + 1]) * dt;
    }
    let total = tail[0];
    Ok(BulkTable { thetas, xs, tail, total })
}

/// Typical eigenvalue locations gamma_{T,k}: tail-quantiles of the density,
/// with integral_{gamma}^{inf} rho = k/T - 1/(2T).
pub fn typical_locations(law: &MpLaw, t: usize, ks: &[usize]) -> Result<Vec<f64>> {
    let eta = (law.eta_default * 0.1).max(1e-12);
    let tables: Vec<BulkTable> = law
        .bulks
        .iter()
        .map(|&(lo, hi)| bulk_table(law, lo, hi, 4000, eta))
        .collect::<Result<_>>()?;
    let total_mass: f64 = tables.iter().map(|b| b.total).sum();
    let mut out = Vec::with_capacity(ks.len());
    for &k in ks {
        if k == 0 {
            return Err(FopcaError::Range("k must be >= 1".into()));
        }
        let target = k as f64 / t as f64 - 0.5 / t as f64;
        if target > total_mass {
            return Err(FopcaError::Range(format!(
                "quantile mass {:.6} exceeds total bulk mass {:.6}",
                target, total_mass
            )));
        }
        // walk bulks from the top down
        let mut remaining = target;
        let mut location = None;
        for table in &tables {
            if remaining <= table.total {
                // find i with tail[i] >= remaining >= tail[i+1] and interpolate
                let mut idx = 0;
                for i in 0..table.tail.len() - 1 {
                    if table.tail[i] >= remaining && table.tail[i + 1] <= remaining {
                        idx = i;
                        break;
                    }
                }
                let (t0, t1) = (table.tail[idx], table.tail[idx + 1]);
                let frac = if (t0 - t1).abs() > 0.0 { (t0 - remaining) / (t0 - t1) } else { 0.0 };
                let theta = table.thetas[idx]
                    + frac * (table.thetas[idx + 1] - table.thetas[idx]);
                let x = table.xs[idx] + frac * (table.xs[idx + 1] - table.xs[idx]);
                let _ = theta;
                location = Some(x);
                break;
            }
            remaining -= table.total;
        }
        out.push(location.ok_or_else(|| FopcaError::Range("quantile not located".into()))?);
    }
    Ok(out)
}

/// Regularity verdicts per Definition of regular edges and bulks.
pub fn check_regularity(law: &MpLaw, delta: f64, delta_prime: f64) -> Result<RegularityReport> {
    if !(delta > 0.0) || !(delta_prime > 0.0) {
        return Err(FopcaError::Input("delta and delta' must be positive".into()));
    }
    let mut edge_verdicts = Vec::with_capacity(law.edges.len());
    for (k, (&a_k, &x_k)) in law.edges.iter().zip(&law.critical_points).enumerate() {
        let above_delta = a_k >= delta;
        let separated = law
            .edges
            .iter()
            .enumerate()
            .filter(|&(l, _)| l != k)
            .map(|(_, &a_l)| (a_k - a_l).abs())
            .fold(f64::INFINITY, f64::min)
            >= delta;
        let away_from_poles = law
            .measure
            .atoms()
            .iter()
            .map(|&(s, _)| (x_k + 1.0 / s).abs())
            .fold(f64::INFINITY, f64::min)
            >= delta;
        edge_verdicts.push(EdgeVerdict {
            edge: a_k,
            above_delta,
            separated,
            away_from_poles,
            regular: above_delta && separated && away_from_poles,
        });
    }

    let threshold = 1e-4;
    let mut bulk_verdicts = Vec::with_capacity(law.bulks.len());
    for &(lo, hi) in &law.bulks {
        let a = lo + delta_prime;
        let b = hi - delta_prime;
        if a >= b {
            return Err(FopcaError::Input(format!(
                "delta' = {} leaves an empty interior for bulk [{:.6}, {:.6}]",
                delta_prime, lo, hi
            )));
        }
        let xs: Vec<f64> = (0..101).map(|j| a + (b - a) * j as f64 / 100.0).collect();
        let dens = density_grid(law, &xs, law.eta_default)?;
        let min_density = dens.iter().cloned().fold(f64::INFINITY, f64::min);
        bulk_verdicts.push(BulkVerdict {
            lo,
            hi,
            min_density,
            threshold,
            regular: min_density >= threshold,
        });
    }
    Ok(RegularityReport { delta, delta_prime, edge_verdicts, bulk_verdicts })
}
