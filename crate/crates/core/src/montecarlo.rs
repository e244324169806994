//! Reproducible Monte Carlo harness for the factor-augmented estimator.
//!
//! The data-generating process draws sparse Gaussian loadings
//! (`b_ik ~ N(0,1)` with probability `p_N = N^{-alpha}`), heteroskedastic
//! noise `u_t = Sigma_e^{1/2} e_t` with `Sigma_e = diag(Uniform(0.5, 1.5))`,
//! i.i.d. standard-normal factors and regression innovations, and
//! `g_t = mu_g + alpha_g' f_t + eps_{g,t}`,
//! `y_t = mu_y + beta g_t + rho' f_t + eta_t`.
//!
//! Every random object is drawn from its own counter-based substream keyed
//! by (seed, replication, object id), so replications are reproducible
//! bit-for-bit regardless of scheduling or worker count.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{FopcaError, Result};
use crate::inference::{self, RegressionData};
use crate::panel::{format_f64, FactorStructure, Panel};
use crate::pca;
use crate::rng::CounterRng;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Ols,
    Iv,
}

impl Default for Mode {
    fn default() -> Self {
        Mode::Ols
    }
}

fn default_mu_g() -> f64 {
    2.0
}
fn default_mu_y() -> f64 {
    3.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: usize,
    pub t: usize,
    pub r: usize,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default = "default_mu_g")]
    pub mu_g: f64,
    #[serde(default = "default_mu_y")]
    pub mu_y: f64,
    pub seed: u64,
    pub replications: usize,
    /// When set, Sigma_e is drawn once (replication key 0) and reused.
    #[serde(default)]
    pub fix_sigma_e: bool,
    #[serde(default)]
    pub mode: Mode,
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.t < 4 {
            return Err(FopcaError::Input(format!("panel too small: N={}, T={}", self.n, self.t)));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(FopcaError::Input(format!("alpha must be in [0, 1), got {}", self.alpha)));
        }
        if self.replications == 0 {
            return Err(FopcaError::Input("replications must be positive".into()));
        }
        Ok(())
    }

    /// Sparsity retention probability p_N = N^{-alpha}.
    pub fn p_n(&self) -> f64 {
        (self.n as f64).powf(-self.alpha)
    }
}

// substream object ids, one per random object in the DGP
const OBJ_LOADINGS: u64 = 1;
const OBJ_SIGMA_E: u64 = 2;
const OBJ_NOISE: u64 = 3;
const OBJ_FACTORS: u64 = 4;
const OBJ_RHO: u64 = 5;
const OBJ_ALPHA_G: u64 = 6;
const OBJ_EPS_G: u64 = 7;
const OBJ_ETA: u64 = 8;
const OBJ_ALPHA_Z: u64 = 9;
const OBJ_NU_Z: u64 = 10;

/// One replication of the generating process.
pub fn generate(config: &DgpConfig, rep: u64) -> Result<(Panel, FactorStructure, RegressionData)> {
    config.validate()?;
    let (n, t, r) = (config.n, config.t, config.r);
    let p_n = config.p_n();

    // sparse loadings: mask uniform and value normal drawn pairwise so the
    // stream layout is independent of the sparsity outcome
    let mut b = DMatrix::zeros(n, r);
    if r > 0 {
        let mut rng = CounterRng::new(config.seed, rep, OBJ_LOADINGS);
        for k in 0..r {
            for i in 0..n {
                let keep = rng.uniform() < p_n;
                let val = rng.standard_normal();
                b[(i, k)] = if keep { val } else { 0.0 };
            }
        }
    }

    let sigma_rep = if config.fix_sigma_e { 0 } else { rep };
    let mut sig_rng = CounterRng::new(config.seed, sigma_rep, OBJ_SIGMA_E);
    let d: Vec<f64> = (0..n).map(|_| sig_rng.uniform_range(0.5, 1.5).sqrt()).collect();

    let mut noise_rng = CounterRng::new(config.seed, rep, OBJ_NOISE);
    let mut u = DMatrix::zeros(n, t);
    for j in 0..t {
        for i in 0..n {
            u[(i, j)] = d[i] * noise_rng.standard_normal();
        }
    }

    let mut f_rng = CounterRng::new(config.seed, rep, OBJ_FACTORS);
    let f = DMatrix::from_fn(t, r, |_, _| f_rng.standard_normal());

    let mut rho_rng = CounterRng::new(config.seed, rep, OBJ_RHO);
    let rho: Vec<f64> = (0..r).map(|_| rho_rng.standard_normal()).collect();
    let mut ag_rng = CounterRng::new(config.seed, rep, OBJ_ALPHA_G);
    let alpha_g: Vec<f64> = (0..r).map(|_| ag_rng.standard_normal()).collect();
    let mut eg_rng = CounterRng::new(config.seed, rep, OBJ_EPS_G);
    let mut eta_rng = CounterRng::new(config.seed, rep, OBJ_ETA);

    let mut g = Vec::with_capacity(t);
    let mut y = Vec::with_capacity(t);
    let mut eps_g = Vec::with_capacity(t);
    for s in 0..t {
        let fl: f64 = (0..r).map(|k| alpha_g[k] * f[(s, k)]).sum();
        let e = eg_rng.standard_normal();
        let gt = config.mu_g + fl + e;
        let rf: f64 = (0..r).map(|k| rho[k] * f[(s, k)]).sum();
        let yt = config.mu_y + config.beta * gt + rf + eta_rng.standard_normal();
        eps_g.push(e);
        g.push(gt);
        y.push(yt);
    }

    let x = &b * f.transpose() + &u;
    let panel = Panel::new(x)?;
    let truth = FactorStructure::new(b, f.clone(), Some(u))?;

    let data = match config.mode {
        Mode::Ols => RegressionData::new_ols(y, g, panel.clone())?,
        Mode::Iv => {
            // z_t = alpha_z' f_t + eps_{g,t} + nu_t, giving gamma = 1
            let mut az_rng = CounterRng::new(config.seed, rep, OBJ_ALPHA_Z);
            let alpha_z: Vec<f64> = (0..r).map(|_| az_rng.standard_normal()).collect();
            let mut nu_rng = CounterRng::new(config.seed, rep, OBJ_NU_Z);
            let z: Vec<f64> = (0..t)
                .map(|s| {
                    let fl: f64 = (0..r).map(|k| alpha_z[k] * f[(s, k)]).sum();
                    fl + eps_g[s] + nu_rng.standard_normal()
                })
                .collect();
            RegressionData::new_iv(y, g, z, panel.clone())?
        }
    };
    Ok((panel, truth, data))
}

#[derive(Debug, Clone, Serialize)]
pub struct McSummary {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
    pub ks_p: f64,
    pub n_reps: usize,
    pub n_degenerate: usize,
}

/// Two-sided Kolmogorov-Smirnov test of the samples against N(0,1);
/// p-value from the asymptotic Kolmogorov series at sqrt(n) * D_n.
pub fn ks_test_normal(samples: &[f64]) -> Result<f64> {
    let n = samples.len();
    if n < 10 {
        return Err(FopcaError::Input(format!("KS test needs >= 10 samples, got {}", n)));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let nf = n as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let cdf = stats::norm_cdf(x);
        d = d.max(((i + 1) as f64 / nf - cdf).abs());
        d = d.max((cdf - i as f64 / nf).abs());
    }
    let lambda = nf.sqrt() * d;
    // survival function of the Kolmogorov distribution:
    // 2 sum_{j>=1} (-1)^{j-1} exp(-2 j^2 lambda^2), truncated at 1e-12
    let mut p = 0.0;
    for j in 1..1000 {
        let term = (-2.0 * (j as f64) * (j as f64) * lambda * lambda).exp();
        if term < 1e-12 {
            break;
        }
        p += if j % 2 == 1 { 2.0 * term } else { -2.0 * term };
    }
    Ok(p.clamp(0.0, 1.0))
}

/// Moments, tail quantiles, and KS p-value of a sample of t statistics.
pub fn summarize(samples: &[f64], n_degenerate: usize) -> Result<McSummary> {
    if samples.len() < 2 {
        return Err(FopcaError::Input(format!(
            "summary needs >= 2 samples, got {}",
            samples.len()
        )));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let ks_p = if samples.len() >= 10 { ks_test_normal(samples)? } else { f64::NAN };
    Ok(McSummary {
        mean: stats::mean(samples),
        sd: stats::std_dev(samples),
        q025: stats::quantile_type7(&sorted, 0.025),
        q975: stats::quantile_type7(&sorted, 0.975),
        ks_p,
        n_reps: samples.len(),
        n_degenerate,
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    /// Retained centered t statistics per working dimension, in replication
    /// order.
    pub t_values: BTreeMap<usize, Vec<f64>>,
    pub summaries: BTreeMap<usize, McSummary>,
}

/// Per-replication results for every requested working dimension; one SVD at
/// max(R) is shared across the grid (the truncations are nested). `None`
/// marks a degenerate replication (weak instrument or zero residual
/// variance).
pub fn run_one_rep(config: &DgpConfig, rep: u64, r_list: &[usize]) -> Result<Vec<Option<f64>>> {
    let (panel, _truth, data) = generate(config, rep)?;
    let max_r = *r_list.iter().max().unwrap();
    let f_full = if max_r > 0 { Some(pca::fit(&panel, max_r)?.f_hat) } else { None };
    let mut out = Vec::with_capacity(r_list.len());
    for &r in r_list {
        let f_slice: Option<DMatrix<f64>> = match (&f_full, r) {
            (_, 0) => None,
            (Some(f), r) => Some(f.columns(0, r).into()),
            (None, _) => None,
        };
        let res = inference::estimate_given_factors(&data.y, &data.g, &data.z, f_slice.as_ref(), r);
        let t_val = match res {
            Ok(r_est) if r_est.sigma_hat > 0.0 => {
                Some(r_est.t_stat_centered(config.beta, config.t))
            }
            Ok(_) => None, // degenerate variance
            Err(FopcaError::WeakInstrument { .. }) | Err(FopcaError::Singularity(_)) => None,
            Err(e) => return Err(e),
        };
        out.push(t_val);
    }
    Ok(out)
}

#[cfg(feature = "parallel")]
fn map_replications(
    config: &DgpConfig,
    r_list: &[usize],
    threads: Option<usize>,
) -> Result<Vec<Vec<Option<f64>>>> {
    use rayon::prelude::*;
    let reps = config.replications as u64;
    let body = || {
        (0..reps)
            .into_par_iter()
            .map(|rep| run_one_rep(config, rep, r_list))
            .collect::<Result<Vec<_>>>()
    };
    match threads {
        Some(k) if k > 0 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| FopcaError::Experiment(format!("thread pool: {}", e)))?;
            pool.install(body)
        }
        _ => body(),
    }
}

#[cfg(not(feature = "parallel"))]
fn map_replications(
    config: &DgpConfig,
    r_list: &[usize],
    _threads: Option<usize>,
) -> Result<Vec<Vec<Option<f64>>>> {
    (0..config.replications as u64)
        .map(|rep| run_one_rep(config, rep, r_list))
        .collect()
}

/// Run the full experiment over a grid of working dimensions. Results are
/// independent of the worker count: replications are merged in index order.
pub fn run_experiment(
    config: &DgpConfig,
    r_list: &[usize],
    threads: Option<usize>,
) -> Result<ExperimentOutcome> {
    config.validate()?;
    if config.replications < 2 {
        return Err(FopcaError::Input("need at least 2 replications".into()));
    }
    if r_list.is_empty() {
        return Err(FopcaError::Input("empty working-dimension list".into()));
    }
    for &r in r_list {
        if r + 2 > config.n.min(config.t) {
            return Err(FopcaError::Input(format!(
                "R = {} too large for N = {}, T = {}",
                r, config.n, config.t
            )));
        }
    }
    let per_rep = map_replications(config, r_list, threads)?;

    let mut t_values: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut summaries = BTreeMap::new();
    for (idx, &r) in r_list.iter().enumerate() {
        let vals: Vec<f64> = per_rep.iter().filter_map(|row| row[idx]).collect();
        let degenerate = config.replications - vals.len();
        if vals.len() < 2 {
            return Err(FopcaError::Experiment(format!(
                "all replications degenerate at R = {}",
                r
            )));
        }
        summaries.insert(r, summarize(&vals, degenerate)?);
        t_values.insert(r, vals);
    }
    Ok(ExperimentOutcome { t_values, summaries })
}

/// One row of the experiment table; `label` carries the varying design
/// parameter (T or alpha).
#[derive(Debug, Clone)]
pub struct TableRow {
    pub label: String,
    pub r: usize,
    pub summary: McSummary,
}

/// CSV table in the layout label,R,mean,sd,q025,q975,ks_p. Non-finite
/// statistics (undefined sd or KS at tiny replication counts) are emitted as
/// empty fields.
pub fn write_summary_table<W: Write>(out: &mut W, rows: &[TableRow]) -> std::io::Result<()> {
    let fmt = |x: f64| if x.is_finite() { format_f64(x) } else { String::new() };
    writeln!(out, "label,R,mean,sd,q025,q975,ks_p")?;
    for row in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            row.label,
            row.r,
            fmt(row.summary.mean),
            fmt(row.summary.sd),
            fmt(row.summary.q025),
            fmt(row.summary.q975),
            fmt(row.summary.ks_p),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn base_config() -> DgpConfig {
        DgpConfig {
            n: 60,
            t: 100,
            r: 2,
            alpha: 0.0,
            beta: 0.0,
            mu_g: 2.0,
            mu_y: 3.0,
            seed: 7,
            replications: 20,
            fix_sigma_e: false,
            mode: Mode::Ols,
        }
    }

    #[test]
    fn dense_loadings_when_alpha_zero() {
        let mut cfg = base_config();
        cfg.n = 200;
        let (_, truth, _) = generate(&cfg, 0).unwrap();
        let zeros = truth.loadings.iter().filter(|x| **x == 0.0).count();
        let frac = zeros as f64 / (200.0 * 2.0);
        assert!(frac < 0.01, "zero fraction = {}", frac);
    }

    #[test]
    fn sparse_loadings_match_binomial_rate() {
        let mut cfg = base_config();
        cfg.n = 400;
        cfg.alpha = 0.5;
        let (_, truth, _) = generate(&cfg, 3).unwrap();
        let p = 400f64.powf(-0.5); // 0.05
        let trials = (400 * cfg.r) as f64;
        let nonzero = truth.loadings.iter().filter(|x| **x != 0.0).count() as f64;
        let se = (p * (1.0 - p) / trials).sqrt();
        assert!(
            (nonzero / trials - p).abs() < 3.0 * se,
            "nonzero fraction = {}",
            nonzero / trials
        );
    }

    #[test]
    fn rank_zero_panel_is_pure_noise() {
        let mut cfg = base_config();
        cfg.r = 0;
        let (panel, truth, _) = generate(&cfg, 1).unwrap();
        let diff = panel.data() - truth.noise.as_ref().unwrap();
        assert_eq!(diff.amax(), 0.0);
    }

    #[test]
    fn generate_is_reproducible_and_reps_differ() {
        let cfg = base_config();
        let (p1, _, d1) = generate(&cfg, 4).unwrap();
        let (p2, _, d2) = generate(&cfg, 4).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(d1.y, d2.y);
        let (p3, _, _) = generate(&cfg, 5).unwrap();
        assert_ne!(p1, p3);
    }

    #[test]
    fn fixed_sigma_e_shares_noise_scales_across_reps() {
        let mut cfg = base_config();
        cfg.fix_sigma_e = true;
        // row-wise noise standard deviations agree across replications
        let (_, t1, _) = generate(&cfg, 0).unwrap();
        let (_, t2, _) = generate(&cfg, 9).unwrap();
        let sd_of_row = |u: &DMatrix<f64>, i: usize| {
            let row: Vec<f64> = (0..u.ncols()).map(|j| u[(i, j)]).collect();
            stats::std_dev(&row)
        };
        let u1 = t1.noise.as_ref().unwrap();
        let u2 = t2.noise.as_ref().unwrap();
        for i in 0..5 {
            let (a, b) = (sd_of_row(u1, i), sd_of_row(u2, i));
            assert!((a - b).abs() < 0.5, "row {} sds {} vs {}", i, a, b);
        }
    }

    #[test]
    fn ks_perfect_quantile_fit() {
        let n = 1000;
        let samples: Vec<f64> = (1..=n)
            .map(|i| crate::rng::inverse_normal_cdf((i as f64 - 0.5) / n as f64))
            .collect();
        let p = ks_test_normal(&samples).unwrap();
        assert!(p > 0.999, "p = {}", p);
    }

    #[test]
    fn ks_degenerate_sample_rejected() {
        let samples = vec![0.0; 100];
        let p = ks_test_normal(&samples).unwrap();
        assert!(p < 1e-10, "p = {}", p);
    }

    #[test]
    fn ks_calibration_meta_test() {
        let mut ps = Vec::with_capacity(500);
        for meta in 0..500u64 {
            let mut rng = CounterRng::new(1234, meta, 0);
            let samples: Vec<f64> = (0..1000).map(|_| rng.standard_normal()).collect();
            ps.push(ks_test_normal(&samples).unwrap());
        }
        let mean_p = stats::mean(&ps);
        assert!((0.45..=0.55).contains(&mean_p), "mean p = {}", mean_p);
    }

    #[test]
    fn ks_small_sample_errors() {
        assert!(ks_test_normal(&[0.0; 5]).is_err());
    }

    #[test]
    fn summarize_trivial_cases() {
        let s = summarize(&[1.0, 2.0, 3.0], 0).unwrap();
        assert_abs_diff_eq!(s.mean, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.sd, 1.0, epsilon = 1e-15);
        let c = summarize(&[4.0; 20], 0).unwrap();
        assert_eq!(c.sd, 0.0);
        assert_eq!(c.q025, 4.0);
        assert_eq!(c.q975, 4.0);
    }

    #[test]
    fn summarize_uniform_quantile_check() {
        let mut rng = CounterRng::new(2024, 0, 0);
        let samples: Vec<f64> = (0..100_000).map(|_| rng.uniform()).collect();
        let s = summarize(&samples, 0).unwrap();
        assert!((s.q025 - 0.025).abs() < 0.01, "q025 = {}", s.q025);
        assert!((s.q975 - 0.975).abs() < 0.01, "q975 = {}", s.q975);
    }

    #[test]
    fn experiment_sanity_small_grid() {
        let cfg = base_config();
        let out = run_experiment(&cfg, &[2, 4], None).unwrap();
        for (_, s) in &out.summaries {
            assert!(s.mean.is_finite() && s.sd.is_finite());
            assert!(s.q025 <= s.q975);
            assert!(s.mean.abs() < 1.5);
        }
    }

    #[test]
    fn grid_estimates_match_standalone_estimator() {
        let cfg = base_config();
        let (_, _, data) = generate(&cfg, 2).unwrap();
        let row = run_one_rep(&cfg, 2, &[0, 2, 5]).unwrap();
        for (idx, &r) in [0usize, 2, 5].iter().enumerate() {
            let direct = inference::iv_estimate(&data, r).unwrap();
            let expect = direct.t_stat_centered(cfg.beta, cfg.t);
            assert_eq!(row[idx], Some(expect), "R = {}", r);
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn worker_count_invariance() {
        let mut cfg = base_config();
        cfg.replications = 12;
        let a = run_experiment(&cfg, &[2, 3], Some(1)).unwrap();
        let b = run_experiment(&cfg, &[2, 3], Some(4)).unwrap();
        for r in [2usize, 3] {
            assert_eq!(a.t_values[&r], b.t_values[&r]);
        }
    }

    #[test]
    fn oversized_r_rejected() {
        let cfg = base_config();
        assert!(run_experiment(&cfg, &[cfg.n.min(cfg.t)], None).is_err());
    }

    #[test]
    fn table_layout() {
        let s = summarize(&[0.1, -0.2, 0.3, 0.05, -0.15, 0.2, 0.0, 0.1, -0.1, 0.05], 1).unwrap();
        let rows = vec![TableRow { label: "400".into(), r: 3, summary: s }];
        let mut buf = Vec::new();
        write_summary_table(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "label,R,mean,sd,q025,q975,ks_p");
        assert!(lines.next().unwrap().starts_with("400,3,"));
    }
}
