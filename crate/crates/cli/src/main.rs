//! Command-line interface: simulation tables, factor-augmented estimation,
//! spectral diagnostics, MP-law densities, and a quick selftest.
//!
//! Exit codes: 0 success, 2 configuration/validation error, 3 numeric
//! failure. Partial outputs are removed when a subcommand fails.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fopca::diagnostics::{boundary_case_r0, ProbeSet};
use fopca::inference::{iv_estimate, RegressionData};
use fopca::montecarlo::{
    self, generate, run_experiment, run_one_rep, summarize, DgpConfig, McSummary, TableRow,
};
use fopca::mp::{density_grid, solve_law, SpectralMeasure};
use fopca::panel::format_f64;
use fopca::{FopcaError, Panel};

const EXIT_CONFIG: i32 = 2;
const EXIT_NUMERIC: i32 = 3;

#[derive(Parser)]
#[command(
    name = "fopca",
    version,
    about = "Fixed-order PCA: estimation, spectral diagnostics, and simulation",
    long_about = "Fixed-order PCA toolkit.\n\nExit codes: 0 = success, 2 = configuration or validation error, 3 = numeric failure.\nSet FOPCA_LOG=debug for verbose logging."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a Monte Carlo experiment from a JSON spec and write the summary table
    Simulate {
        /// JSON experiment spec: {"dgp": {...}, "r_list": [...], optional "t_grid"/"alpha_grid"}
        #[arg(long)]
        spec: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Override the seed from the spec
        #[arg(long)]
        seed: Option<u64>,
        /// Override the replication count from the spec
        #[arg(long)]
        reps: Option<usize>,
        /// Worker thread count (default: all cores)
        #[arg(long)]
        threads: Option<usize>,
        /// Also dump per-replication t statistics
        #[arg(long)]
        dump_t: bool,
        /// Also dump the first replication's panel and outcomes for re-estimation
        #[arg(long)]
        dump_data: bool,
    },
    /// Estimate the treatment effect on a panel + outcomes CSV pair
    Estimate {
        /// Panel CSV (rows = units, columns = periods)
        #[arg(long)]
        panel: PathBuf,
        /// Outcomes CSV with named columns y,g[,z]
        #[arg(long)]
        outcomes: PathBuf,
        /// Panel CSV has a header row
        #[arg(long)]
        header: bool,
        /// Working dimension R
        #[arg(long = "R")]
        r: Option<usize>,
        /// Comma-separated R grid for a robustness profile
        #[arg(long)]
        grid: Option<String>,
        /// OLS mode (z = g); the default
        #[arg(long)]
        ols: bool,
        /// IV mode (requires a z column)
        #[arg(long)]
        iv: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Spectral scree, bulk MP fit, and probe incoherence for a panel
    Diagnose {
        #[arg(long)]
        panel: PathBuf,
        #[arg(long)]
        header: bool,
        /// Number of leading components to inspect
        #[arg(long = "R")]
        r: usize,
        /// Seed for the probe vectors
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve a deformed MP law and tabulate its density
    MpDensity {
        /// JSON spec: {"atoms": [[s, w], ...], "phi": ..., optional "points"/"eta"}
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run quick end-to-end checks of the core routines
    Selftest,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FOPCA_LOG", "warn")).init();
    let cli = Cli::parse();
    let code = match run(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            classify(&e)
        }
    };
    std::process::exit(code);
}

fn classify(err: &FopcaError) -> i32 {
    match err {
        FopcaError::Input(_)
        | FopcaError::Parse(_)
        | FopcaError::Dimension(_)
        | FopcaError::Io(_)
        | FopcaError::DegreesOfFreedom(_)
        | FopcaError::Range(_)
        | FopcaError::RequiresSynthetic(_)
        | FopcaError::UnsupportedRegime(_) => EXIT_CONFIG,
        _ => EXIT_NUMERIC,
    }
}

fn run(cmd: Cmd) -> Result<(), FopcaError> {
    match cmd {
        Cmd::Simulate { spec, out, seed, reps, threads, dump_t, dump_data } => {
            with_outdir(out, |dir| cmd_simulate(&spec, dir, seed, reps, threads, dump_t, dump_data))
        }
        Cmd::Estimate { panel, outcomes, header, r, grid, ols, iv, out } => with_outdir(out, |dir| {
            cmd_estimate(&panel, &outcomes, header, r, grid.as_deref(), ols, iv, dir)
        }),
        Cmd::Diagnose { panel, header, r, seed, out } => {
            with_outdir(out, |dir| cmd_diagnose(&panel, header, r, seed, dir))
        }
        Cmd::MpDensity { spec, out } => with_outdir(out, |dir| cmd_mp_density(&spec, dir)),
        Cmd::Selftest => cmd_selftest(),
    }
}

/// Tracks files written into the output directory so that a failing
/// subcommand leaves nothing behind, and assembles the run manifest.
struct OutDir {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl OutDir {
    fn file(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.written.push(p.clone());
        p
    }
}

fn with_outdir<F>(dir: PathBuf, body: F) -> Result<(), FopcaError>
where
    F: FnOnce(&mut OutDir) -> Result<Manifest, FopcaError>,
{
    std::fs::create_dir_all(&dir)?;
    let mut out = OutDir { dir: dir.clone(), written: Vec::new() };
    let started = now_rfc3339();
    match body(&mut out) {
        Ok(mut manifest) => {
            manifest.started = started;
            manifest.finished = now_rfc3339();
            manifest.version = env!("CARGO_PKG_VERSION").to_string();
            manifest.outputs = out
                .written
                .iter()
                .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
                .collect();
            let text = serde_json::to_string_pretty(&manifest)
                .map_err(|e| FopcaError::Parse(e.to_string()))?;
            std::fs::write(dir.join("manifest.json"), text)?;
            Ok(())
        }
        Err(e) => {
            for p in &out.written {
                let _ = std::fs::remove_file(p);
            }
            Err(e)
        }
    }
}

#[derive(Serialize, Default)]
struct Manifest {
    command: String,
    config_digest: String,
    seed: Option<u64>,
    version: String,
    started: String,
    finished: String,
    outputs: Vec<String>,
}

fn now_rfc3339() -> String {
    time::OffsetDateTime::now_utc()
        .format(&time::format_description::well_known::Rfc3339)
        .unwrap_or_default()
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Deserialize)]
struct ExperimentSpec {
    dgp: DgpConfig,
    r_list: Vec<usize>,
    #[serde(default)]
    t_grid: Option<Vec<usize>>,
    #[serde(default)]
    alpha_grid: Option<Vec<f64>>,
}

fn cmd_simulate(
    spec_path: &Path,
    out: &mut OutDir,
    seed: Option<u64>,
    reps: Option<usize>,
    threads: Option<usize>,
    dump_t: bool,
    dump_data: bool,
) -> Result<Manifest, FopcaError> {
    let raw = std::fs::read(spec_path)?;
    let spec: ExperimentSpec =
        serde_json::from_slice(&raw).map_err(|e| FopcaError::Parse(format!("spec: {}", e)))?;
    if spec.t_grid.is_some() && spec.alpha_grid.is_some() {
        return Err(FopcaError::Input("give t_grid or alpha_grid, not both".into()));
    }
    let mut base = spec.dgp.clone();
    if let Some(s) = seed {
        base.seed = s;
    }
    if let Some(n) = reps {
        base.replications = n;
    }
    base.validate()?;

    // one table cell group per grid value; the varying parameter is the label
    let cells: Vec<(String, DgpConfig)> = if let Some(ts) = &spec.t_grid {
        ts.iter()
            .map(|&t| {
                let mut c = base.clone();
                c.t = t;
                (t.to_string(), c)
            })
            .collect()
    } else if let Some(alphas) = &spec.alpha_grid {
        alphas
            .iter()
            .map(|&a| {
                let mut c = base.clone();
                c.alpha = a;
                (format_f64(a), c)
            })
            .collect()
    } else {
        vec![(base.t.to_string(), base.clone())]
    };

    let mut rows: Vec<TableRow> = Vec::new();
    let mut dumps: Vec<(String, usize, Vec<f64>)> = Vec::new();
    for (label, config) in &cells {
        log::info!("running cell {} ({} replications)", label, config.replications);
        let by_r: BTreeMap<usize, (McSummary, Vec<f64>)> = if config.replications == 1 {
            // single replication: degenerate summary with undefined spread
            let row = run_one_rep(config, 0, &spec.r_list)?;
            let mut map = BTreeMap::new();
            for (idx, &r) in spec.r_list.iter().enumerate() {
                let (summary, vals) = match row[idx] {
                    Some(t) => (
                        McSummary {
                            mean: t,
                            sd: f64::NAN,
                            q025: t,
                            q975: t,
                            ks_p: f64::NAN,
                            n_reps: 1,
                            n_degenerate: 0,
                        },
                        vec![t],
                    ),
                    None => (
                        McSummary {
                            mean: f64::NAN,
                            sd: f64::NAN,
                            q025: f64::NAN,
                            q975: f64::NAN,
                            ks_p: f64::NAN,
                            n_reps: 0,
                            n_degenerate: 1,
                        },
                        Vec::new(),
                    ),
                };
                map.insert(r, (summary, vals));
            }
            map
        } else {
            let outcome = run_experiment(config, &spec.r_list, threads)?;
            outcome
                .summaries
                .into_iter()
                .map(|(r, s)| {
                    let vals = outcome.t_values.get(&r).cloned().unwrap_or_default();
                    (r, (s, vals))
                })
                .collect()
        };
        for &r in &spec.r_list {
            let (summary, vals) = by_r.get(&r).expect("summary per R").clone();
            rows.push(TableRow { label: label.clone(), r, summary });
            if dump_t {
                dumps.push((label.clone(), r, vals));
            }
        }
    }

    let table_path = out.file("table.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&table_path)?);
    montecarlo::write_summary_table(&mut f, &rows)?;
    f.flush()?;

    if dump_t {
        let path = out.file("t_values.csv");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
        writeln!(f, "label,R,index,t")?;
        for (label, r, vals) in &dumps {
            for (i, t) in vals.iter().enumerate() {
                writeln!(f, "{},{},{},{}", label, r, i, format_f64(*t))?;
            }
        }
        f.flush()?;
    }

    if dump_data {
        let (_, config) = &cells[0];
        let (panel, _, data) = generate(config, 0)?;
        panel.write_csv(&out.file("panel.csv"))?;
        let path = out.file("outcomes.csv");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
        let iv_mode = data.z != data.g;
        writeln!(f, "{}", if iv_mode { "y,g,z" } else { "y,g" })?;
        for i in 0..data.y.len() {
            if iv_mode {
                writeln!(
                    f,
                    "{},{},{}",
                    format_f64(data.y[i]),
                    format_f64(data.g[i]),
                    format_f64(data.z[i])
                )?;
            } else {
                writeln!(f, "{},{}", format_f64(data.y[i]), format_f64(data.g[i]))?;
            }
        }
        f.flush()?;
    }

    Ok(Manifest {
        command: "simulate".into(),
        config_digest: sha256_hex(&raw),
        seed: Some(base.seed),
        ..Default::default()
    })
}

// ---------------------------------------------------------------------------
// estimate

struct Outcomes {
    y: Vec<f64>,
    g: Vec<f64>,
    z: Option<Vec<f64>>,
}

fn read_outcomes(path: &Path) -> Result<Outcomes, FopcaError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| FopcaError::Input("empty outcomes CSV".into()))?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_lowercase()).collect();
    let idx = |name: &str| names.iter().position(|n| n == name);
    let (yi, gi) = match (idx("y"), idx("g")) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(FopcaError::Input(
                "outcomes CSV must have named columns y and g (optional z)".into(),
            ))
        }
    };
    let zi = idx("z");
    let mut y = Vec::new();
    let mut g = Vec::new();
    let mut z = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|e| FopcaError::Parse(format!("outcomes line {}: {}", lineno + 2, e)))
            })
            .collect::<Result<_, _>>()?;
        if cells.len() != names.len() {
            return Err(FopcaError::Parse(format!(
                "outcomes line {}: expected {} columns",
                lineno + 2,
                names.len()
            )));
        }
        y.push(cells[yi]);
        g.push(cells[gi]);
        if let Some(zi) = zi {
            z.push(cells[zi]);
        }
    }
    Ok(Outcomes { y, g, z: zi.map(|_| z) })
}

#[derive(Serialize)]
struct EstimateJson {
    beta_hat: Option<f64>,
    se: Option<f64>,
    t: Option<f64>,
    first_stage_t: Option<f64>,
    #[serde(rename = "R")]
    r: usize,
    gamma_hat: Option<f64>,
    warnings: Vec<String>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

fn estimate_one(data: &RegressionData, r: usize) -> EstimateJson {
    match iv_estimate(data, r) {
        Ok(res) => {
            let t = data.panel.n_cols() as f64;
            let se = res.sigma_hat / t.sqrt();
            EstimateJson {
                beta_hat: Some(res.beta_hat),
                se: finite(se),
                t: finite(res.t_stat),
                first_stage_t: finite(res.first_stage_t),
                r,
                gamma_hat: Some(res.gamma_hat),
                warnings: res.warnings,
            }
        }
        Err(FopcaError::WeakInstrument { gamma_hat, first_stage_t }) => EstimateJson {
            beta_hat: None,
            se: None,
            t: None,
            first_stage_t: finite(first_stage_t),
            r,
            gamma_hat: Some(gamma_hat),
            warnings: vec![format!(
                "weak instrument: |gamma_hat| = {:.3e} below tolerance",
                gamma_hat
            )],
        },
        Err(e) => EstimateJson {
            beta_hat: None,
            se: None,
            t: None,
            first_stage_t: None,
            r,
            gamma_hat: None,
            warnings: vec![format!("estimation failed: {}", e)],
        },
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_estimate(
    panel_path: &Path,
    outcomes_path: &Path,
    header: bool,
    r: Option<usize>,
    grid: Option<&str>,
    ols: bool,
    iv: bool,
    out: &mut OutDir,
) -> Result<Manifest, FopcaError> {
    if ols && iv {
        return Err(FopcaError::Input("choose one of --ols and --iv".into()));
    }
    let panel = Panel::read_csv(panel_path, header)?;
    let outcomes = read_outcomes(outcomes_path)?;
    let data = if iv {
        let z = outcomes
            .z
            .ok_or_else(|| FopcaError::Input("--iv requires a z column in the outcomes CSV".into()))?;
        RegressionData::new_iv(outcomes.y, outcomes.g, z, panel)?
    } else {
        RegressionData::new_ols(outcomes.y, outcomes.g, panel)?
    };

    let digest_input = format!(
        "estimate:{}:{}:{:?}:{:?}:{}:{}",
        panel_path.display(),
        outcomes_path.display(),
        r,
        grid,
        ols,
        iv
    );

    if let Some(grid) = grid {
        let mut rs: Vec<usize> = grid
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<usize>()
                    .map_err(|e| FopcaError::Parse(format!("--grid: {}", e)))
            })
            .collect::<Result<_, _>>()?;
        rs.sort_unstable();
        rs.dedup();
        let path = out.file("profile.csv");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
        let fmt = |x: Option<f64>| x.map(format_f64).unwrap_or_default();
        writeln!(f, "R,beta_hat,se,t,first_stage_t,gamma_hat")?;
        for r in rs {
            let e = estimate_one(&data, r);
            writeln!(
                f,
                "{},{},{},{},{},{}",
                e.r,
                fmt(e.beta_hat),
                fmt(e.se),
                fmt(e.t),
                fmt(e.first_stage_t),
                fmt(e.gamma_hat)
            )?;
        }
        f.flush()?;
    } else {
        let r = r.ok_or_else(|| FopcaError::Input("give --R <int> or --grid R1,R2,...".into()))?;
        let result = estimate_one(&data, r);
        let path = out.file("result.json");
        let text =
            serde_json::to_string_pretty(&result).map_err(|e| FopcaError::Parse(e.to_string()))?;
        std::fs::write(&path, text)?;
    }

    Ok(Manifest {
        command: "estimate".into(),
        config_digest: sha256_hex(digest_input.as_bytes()),
        seed: None,
        ..Default::default()
    })
}

// ---------------------------------------------------------------------------
// diagnose

#[derive(Serialize)]
struct DiagnoseJson {
    n: usize,
    t: usize,
    phi: f64,
    sigma2_hat: f64,
    bulk_edges: Vec<f64>,
    top_eigenvalues: Vec<f64>,
    spike_flags: Vec<bool>,
    incoherence_left: f64,
    incoherence_right: f64,
}

fn cmd_diagnose(
    panel_path: &Path,
    header: bool,
    r: usize,
    seed: u64,
    out: &mut OutDir,
) -> Result<Manifest, FopcaError> {
    if r == 0 {
        return Err(FopcaError::Input("--R must be positive".into()));
    }
    let panel = Panel::read_csv(panel_path, header)?;
    let (n, t) = (panel.n_rows(), panel.n_cols());
    if r > n.min(t) {
        return Err(FopcaError::Input(format!("--R {} exceeds min(N, T) = {}", r, n.min(t))));
    }
    let sv = fopca::svd::singular_values(panel.data());
    let scree_path = out.file("scree.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&scree_path)?);
    writeln!(f, "k,singular_value,eigenvalue")?;
    for (k, s) in sv.iter().enumerate() {
        writeln!(f, "{},{},{}", k + 1, format_f64(*s), format_f64(s * s / t as f64))?;
    }
    f.flush()?;

    // bulk variance from the trailing spectrum energy, then the single-atom
    // MP law at the panel's aspect ratio
    let trailing_energy: f64 = sv.iter().skip(r).map(|s| s * s).sum();
    let sigma2_hat = trailing_energy / (n as f64 * t as f64);
    let phi = panel.aspect_ratio();
    let law = solve_law(&SpectralMeasure::single(sigma2_hat.max(1e-300)), phi)?;
    let top_eigenvalues: Vec<f64> = sv.iter().take(r).map(|s| s * s / t as f64).collect();
    let upper = law.edges[0];
    let spike_flags: Vec<bool> = top_eigenvalues.iter().map(|&l| l > 1.05 * upper).collect();

    let probes = ProbeSet::generate(n, t, seed);
    let (incoherence_left, incoherence_right) = boundary_case_r0(&panel, r, &probes)?;

    let report = DiagnoseJson {
        n,
        t,
        phi,
        sigma2_hat,
        bulk_edges: law.edges.clone(),
        top_eigenvalues,
        spike_flags,
        incoherence_left,
        incoherence_right,
    };
    let path = out.file("diagnose.json");
    let text = serde_json::to_string_pretty(&report).map_err(|e| FopcaError::Parse(e.to_string()))?;
    std::fs::write(&path, text)?;

    let digest = format!("diagnose:{}:{}:{}", panel_path.display(), r, seed);
    Ok(Manifest {
        command: "diagnose".into(),
        config_digest: sha256_hex(digest.as_bytes()),
        seed: Some(seed),
        ..Default::default()
    })
}

// ---------------------------------------------------------------------------
// mp-density

#[derive(Deserialize)]
struct MpSpec {
    atoms: Vec<(f64, f64)>,
    phi: f64,
    #[serde(default = "default_points")]
    points: usize,
    #[serde(default)]
    eta: Option<f64>,
}

fn default_points() -> usize {
    400
}

#[derive(Serialize)]
struct MpJson {
    phi: f64,
    edges: Vec<f64>,
    bulks: Vec<(f64, f64)>,
    critical_points: Vec<f64>,
    edges_singular_scale: Vec<f64>,
}

fn cmd_mp_density(spec_path: &Path, out: &mut OutDir) -> Result<Manifest, FopcaError> {
    let raw = std::fs::read(spec_path)?;
    let spec: MpSpec =
        serde_json::from_slice(&raw).map_err(|e| FopcaError::Parse(format!("spec: {}", e)))?;
    let measure = SpectralMeasure::new(spec.atoms)?;
    let law = solve_law(&measure, spec.phi)?;
    let eta = spec.eta.unwrap_or(law.eta_default);

    let report = MpJson {
        phi: spec.phi,
        edges: law.edges.clone(),
        bulks: law.bulks.clone(),
        critical_points: law.critical_points.clone(),
        edges_singular_scale: law.edges_singular_scale(),
    };
    let path = out.file("law.json");
    let text = serde_json::to_string_pretty(&report).map_err(|e| FopcaError::Parse(e.to_string()))?;
    std::fs::write(&path, text)?;

    let hi = law.edges[0] * 1.1;
    let xs: Vec<f64> = (0..spec.points)
        .map(|j| hi * (j as f64 + 0.5) / spec.points as f64)
        .collect();
    let dens = density_grid(&law, &xs, eta)?;
    let path = out.file("density.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    writeln!(f, "x,density")?;
    for (x, d) in xs.iter().zip(&dens) {
        writeln!(f, "{},{}", format_f64(*x), format_f64(*d))?;
    }
    f.flush()?;

    Ok(Manifest {
        command: "mp-density".into(),
        config_digest: sha256_hex(&raw),
        seed: None,
        ..Default::default()
    })
}

// ---------------------------------------------------------------------------
// selftest

fn cmd_selftest() -> Result<(), FopcaError> {
    let mut failures = 0usize;
    let mut check = |name: &str, ok: bool| {
        println!("selftest: {:<40} {}", name, if ok { "ok" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    // rank-2 noiseless panel is reconstructed exactly
    {
        let mut rng = fopca::rng::CounterRng::new(1, 0, 0);
        let b = nalgebra::DMatrix::from_fn(20, 2, |_, _| rng.standard_normal());
        let fm = nalgebra::DMatrix::from_fn(30, 2, |_, _| rng.standard_normal());
        let panel = Panel::new(&b * fm.transpose())?;
        let fit = fopca::fit(&panel, 4)?;
        let err = (&fit.m_hat - panel.data()).norm() / panel.data().norm();
        check("noiseless low-rank reconstruction", err < 1e-10);
    }
    // single-atom MP edges match the closed form
    {
        let law = solve_law(&SpectralMeasure::single(1.0), 0.5)?;
        let s = 0.5f64.sqrt();
        let ok = (law.edges[0] - (1.0 + s) * (1.0 + s)).abs() < 1e-8
            && (law.edges[1] - (1.0 - s) * (1.0 - s)).abs() < 1e-8;
        check("MP edges vs closed form", ok);
    }
    // KS test accepts its own quantiles
    {
        let samples: Vec<f64> = (1..=1000)
            .map(|i| fopca::rng::inverse_normal_cdf((i as f64 - 0.5) / 1000.0))
            .collect();
        let p = montecarlo::ks_test_normal(&samples)?;
        check("KS perfect-quantile fit", p > 0.999);
    }
    // residualization annihilates the projection span
    {
        let mut rng = fopca::rng::CounterRng::new(2, 0, 0);
        let fm = nalgebra::DMatrix::from_fn(40, 3, |_, _| rng.standard_normal());
        let a: Vec<f64> = (0..40).map(|i| 1.0 + fm[(i, 0)] - 2.0 * fm[(i, 2)]).collect();
        let res = fopca::inference::residualize(&a, Some(&fm))?;
        let norm = res.iter().map(|x| x * x).sum::<f64>().sqrt();
        check("residualization annihilation", norm < 1e-9);
    }
    // a small experiment runs end to end
    {
        let cfg = DgpConfig {
            n: 40,
            t: 80,
            r: 2,
            alpha: 0.0,
            beta: 0.0,
            mu_g: 2.0,
            mu_y: 3.0,
            seed: 3,
            replications: 10,
            fix_sigma_e: false,
            mode: montecarlo::Mode::Ols,
        };
        let outcome = run_experiment(&cfg, &[2, 4], None)?;
        let ok = outcome.summaries.values().all(|s| s.mean.is_finite() && s.sd > 0.0);
        check("small Monte Carlo experiment", ok);
        // single-sample summary guard
        let s = summarize(&outcome.t_values[&2], 0)?;
        check("summary is finite", s.sd.is_finite());
    }

    if failures > 0 {
        Err(FopcaError::Numeric(format!("{} selftest check(s) failed", failures)))
    } else {
        Ok(())
    }
}
