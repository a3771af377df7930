//! Experiment runner: reads a JSON run configuration, executes one of the
//! named experiments, and writes machine-readable artifacts (summary.json,
//! trace/snapshot CSVs) into the output directory.
//!
//! Exit codes: 0 all checks pass, 1 configuration error, 2 check failure,
//! 3 numeric failure (a diagnostic snapshot path is printed to stderr).
//!
//! Defaults: L = 4, n = 512, tau = 1e-3, m = 256, optimizer tol = 1e-8,
//! cfl_safety = 0.4, dt_max = 1e-3, eps sweep {0, 0.02, 0.05, 0.1} over
//! window [1, 5]. Override any of them per run in the config file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::Parser;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crossdiff::baselines;
use crossdiff::error::Error;
use crossdiff::flow::{run_flow, FlowConfig};
use crossdiff::grid::{random_x0_pair, uniform_density, DensityPair, Grid1D};
use crossdiff::jko::{
    default_zeta_set, h1_diagnostics, jko_run, jko_step, weak_residual, JkoConfig,
};
use crossdiff::lyapunov::{
    self, canonical_pair_family, ck_check, decay_fit, geodesic_convexity_probe,
    kernel_gradient_check, l_convexity_floor, lyapunov_decomposition, n_vs_l_check,
    slope_domination_probe, FlowTrace,
};
use crossdiff::model::{validate_example_params, Kernel, ModelSpec, ModelSpecJson, SampleSpec};
use crossdiff::steady::{
    quadratic_c_tilde, solve_steady_general, solve_steady_quadratic, SteadyState,
};

#[derive(Parser)]
#[command(name = "crossdiff", version, about = "Two-species diffusion-aggregation laboratory")]
struct Cli {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the configured RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress progress output; artifacts are still written.
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    model: ModelSpecJson,
    #[serde(default)]
    grid: GridConfig,
    experiment: Experiment,
    #[serde(default)]
    params: Value,
    #[serde(default = "default_out_dir")]
    output_dir: String,
    #[serde(default)]
    seed: u64,
}

fn default_out_dir() -> String {
    "out".into()
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridConfig {
    /// Half-width of the computational box; None = auto (4.0).
    l: Option<f64>,
    n: Option<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { l: None, n: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Experiment {
    Validate,
    Steady,
    Flow,
    Jko,
    DecaySweep,
    Probes,
}

impl Experiment {
    fn name(self) -> &'static str {
        match self {
            Experiment::Validate => "validate",
            Experiment::Steady => "steady",
            Experiment::Flow => "flow",
            Experiment::Jko => "jko",
            Experiment::DecaySweep => "decay-sweep",
            Experiment::Probes => "probes",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
enum Init {
    /// Recentered uniform pair on [lo, hi] for both species.
    Uniform {
        #[serde(default = "default_lo")]
        lo: f64,
        #[serde(default = "default_hi")]
        hi: f64,
    },
    /// Steady profiles translated by -shift (species 1) and +shift (species 2).
    AntiTranslate { shift: f64 },
    /// The solved steady state itself (flat-trace check).
    Steady,
}

fn default_lo() -> f64 {
    -0.5
}
fn default_hi() -> f64 {
    0.5
}

impl Default for Init {
    fn default() -> Self {
        Init::Uniform { lo: default_lo(), hi: default_hi() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SteadyParams {
    tol: f64,
    damping: f64,
    residual_tol: f64,
}

impl Default for SteadyParams {
    fn default() -> Self {
        Self { tol: 1e-10, damping: 0.5, residual_tol: 1e-5 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FlowParams {
    t_final: f64,
    cfl_safety: f64,
    dt_max: f64,
    snapshot_every: usize,
    init: Init,
    /// Fit window for the decay rates; None fits over the middle of the run.
    fit_window: Option<[f64; 2]>,
    steady_tol: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            t_final: 2.0,
            cfl_safety: 0.4,
            dt_max: 1e-3,
            snapshot_every: 20,
            init: Init::default(),
            fit_window: None,
            steady_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct JkoParams {
    tau: f64,
    m: usize,
    nsteps: usize,
    tol: f64,
    max_iters: usize,
    /// Cutoff height for the H^1 diagnostics.
    alpha: f64,
    /// Step size for the residual diagnostics; the weak-residual bound scales
    /// with tau while the rasterization error floor does not, so the check
    /// needs a resolved step.
    residual_tau: f64,
    init: Init,
    steady_tol: f64,
}

impl Default for JkoParams {
    fn default() -> Self {
        let jc = JkoConfig::default();
        Self {
            tau: jc.tau,
            m: jc.m,
            nsteps: 100,
            tol: jc.opt.tol,
            max_iters: jc.opt.max_iters,
            alpha: 0.5,
            residual_tau: 1e-2,
            init: Init::default(),
            steady_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SweepParams {
    eps_list: Vec<f64>,
    t_final: f64,
    window: [f64; 2],
    cfl_safety: f64,
    dt_max: f64,
    snapshot_every: usize,
    steady_tol: f64,
}

impl Default for SweepParams {
    fn default() -> Self {
        Self {
            eps_list: vec![0.0, 0.02, 0.05, 0.1],
            t_final: 8.0,
            window: [1.0, 5.0],
            cfl_safety: 0.4,
            dt_max: 1e-3,
            snapshot_every: 20,
            steady_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ProbesParams {
    npairs: usize,
    quantiles: usize,
    steady_tol: f64,
}

impl Default for ProbesParams {
    fn default() -> Self {
        Self { npairs: 100, quantiles: 256, steady_tol: 1e-10 }
    }
}

#[derive(Debug, Clone, Serialize)]
struct Check {
    name: String,
    pass: bool,
    detail: String,
}

impl Check {
    fn new(name: &str, pass: bool, detail: String) -> Self {
        Self { name: name.into(), pass, detail }
    }
}

struct Outcome {
    results: Value,
    checks: Vec<Check>,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(&cli) {
        Ok(all_pass) => {
            if all_pass {
                0
            } else {
                2
            }
        }
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            code
        }
    };
    std::process::exit(code);
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) | Error::Domain(_) => 3,
        _ => 1,
    }
}

fn run(cli: &Cli) -> Result<bool, (i32, String)> {
    let bytes = fs::read(&cli.config)
        .map_err(|e| (1, format!("cannot read {}: {e}", cli.config.display())))?;
    let config_sha256 = hex(&Sha256::digest(&bytes));
    let mut config: RunConfig =
        serde_json::from_slice(&bytes).map_err(|e| (1, format!("invalid config: {e}")))?;
    if let Some(out) = &cli.out {
        config.output_dir = out.display().to_string();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let out_dir = PathBuf::from(&config.output_dir);
    fs::create_dir_all(&out_dir).map_err(|e| (1, format!("cannot create output dir: {e}")))?;

    let grid = Grid1D::new(config.grid.l.unwrap_or(4.0), config.grid.n.unwrap_or(512))
        .map_err(|e| (1, e.to_string()))?;

    // Admissibility gates everything except the validate experiment, which
    // exists to report on inadmissible tuples.
    let model = if config.experiment == Experiment::Validate {
        None
    } else {
        match ModelSpec::from_json(&config.model) {
            Ok(m) => Some(m),
            Err(e) => {
                if let Ok(report) = validate_example_params(
                    config.model.a1,
                    config.model.a2,
                    config.model.b1,
                    config.model.b2,
                    config.model.gamma,
                ) {
                    eprintln!(
                        "admissibility report: {}",
                        serde_json::to_string_pretty(&report).unwrap_or_default()
                    );
                }
                return Err((1, e.to_string()));
            }
        }
    };

    let outcome = dispatch(&config, model.as_ref(), &grid, &out_dir, cli.quiet);
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            let code = exit_code(&e);
            if code == 3 {
                let snap = out_dir.join("diagnostic.json");
                let diag = json!({
                    "config_sha256": config_sha256,
                    "error": e.to_string(),
                    "experiment": config.experiment.name(),
                });
                let _ = fs::write(&snap, serde_json::to_string_pretty(&diag).unwrap());
                eprintln!("diagnostic snapshot: {}", snap.display());
            }
            return Err((code, e.to_string()));
        }
    };

    let all_pass = outcome.checks.iter().all(|c| c.pass);
    let summary = json!({
        "experiment": config.experiment.name(),
        "config_sha256": config_sha256,
        "seed": config.seed,
        "model": config.model,
        "grid": { "l": grid.half_width, "n": grid.n },
        "baselines": baseline_block(),
        "results": outcome.results,
        "checks": outcome.checks,
        "pass": all_pass,
    });
    fs::write(out_dir.join("summary.json"), pretty(&summary))
        .map_err(|e| (1, format!("cannot write summary: {e}")))?;

    if !cli.quiet {
        for c in &outcome.checks {
            println!("[{}] {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        println!("{} -> {}", config.experiment.name(), if all_pass { "PASS" } else { "FAIL" });
    }
    Ok(all_pass)
}

fn baseline_block() -> Value {
    json!({
        "kappa": baselines::KAPPA,
        "eps0": baselines::EPS0,
        "k0": baselines::K0,
        "c_ck": baselines::C_CK,
        "c_n": baselines::C_N,
        "c_hat": baselines::C_HAT,
        "rel_tol": baselines::REL_TOL,
    })
}

fn dispatch(
    config: &RunConfig,
    model: Option<&ModelSpec>,
    grid: &Grid1D,
    out_dir: &Path,
    quiet: bool,
) -> crossdiff::Result<Outcome> {
    match config.experiment {
        Experiment::Validate => run_validate(config),
        Experiment::Steady => run_steady(config, model.unwrap(), grid, out_dir),
        Experiment::Flow => run_flow_experiment(config, model.unwrap(), grid, out_dir),
        Experiment::Jko => run_jko_experiment(config, model.unwrap(), grid, out_dir),
        Experiment::DecaySweep => run_sweep(config, model.unwrap(), grid, out_dir, quiet),
        Experiment::Probes => run_probes(config, model.unwrap(), grid),
    }
}

fn parse_params<T: Default + for<'de> Deserialize<'de>>(v: &Value) -> crossdiff::Result<T> {
    if v.is_null() {
        return Ok(T::default());
    }
    serde_json::from_value(v.clone())
        .map_err(|e| Error::Config(format!("invalid experiment params: {e}")))
}

fn run_validate(config: &RunConfig) -> crossdiff::Result<Outcome> {
    let m = &config.model;
    let report = validate_example_params(m.a1, m.a2, m.b1, m.b2, m.gamma)?;
    let mut checks: Vec<Check> = report
        .conditions
        .iter()
        .map(|c| Check::new(&c.name, c.pass, format!("slack {:.6e}", c.slack)))
        .collect();
    let mut results = serde_json::Map::new();
    results.insert("admissibility".into(), serde_json::to_value(&report)?);
    if report.admissible {
        let spec = ModelSpec::from_json(m)?;
        let audit = spec.hypothesis_numeric_audit(&SampleSpec::default())?;
        for c in &audit.checks {
            checks.push(Check::new(&c.name, c.pass, format!("worst {:.6e}", c.worst)));
        }
        results.insert("audit".into(), serde_json::to_value(&audit)?);
    }
    Ok(Outcome { results: Value::Object(results), checks })
}

/// Quadratic closed-form path applies for quadratic internal energies with a
/// quadratic kernel; anything else goes through the damped fixed point.
fn solve_steady_auto(m: &ModelSpec, grid: &Grid1D, tol: f64, damping: f64) -> crossdiff::Result<SteadyState> {
    let quadratic = m.f1.exponent() == 2.0
        && m.f2.exponent() == 2.0
        && matches!(m.kernel, Kernel::Quadratic { .. });
    if quadratic {
        solve_steady_quadratic(m, grid, tol)
    } else {
        solve_steady_general(m, grid, tol, damping)
    }
}

fn run_steady(
    config: &RunConfig,
    m: &ModelSpec,
    grid: &Grid1D,
    out_dir: &Path,
) -> crossdiff::Result<Outcome> {
    let p: SteadyParams = parse_params(&config.params)?;
    let s = solve_steady_auto(m, grid, p.tol, p.damping)?;
    let quadratic = m.f1.exponent() == 2.0
        && m.f2.exponent() == 2.0
        && matches!(m.kernel, Kernel::Quadratic { .. });
    let c_tilde = quadratic.then(|| quadratic_c_tilde(&s, m));
    let summary = s.summary(m, c_tilde);
    write_profile_csv(&out_dir.join("steady.csv"), &s.pair)?;
    let checks = vec![
        Check::new(
            "el_residual_1",
            summary.residual1 <= p.residual_tol,
            format!("{:.3e} <= {:.1e}", summary.residual1, p.residual_tol),
        ),
        Check::new(
            "el_residual_2",
            summary.residual2 <= p.residual_tol,
            format!("{:.3e} <= {:.1e}", summary.residual2, p.residual_tol),
        ),
        Check::new("unit_masses", {
            let mom = s.pair.moments();
            (mom.mass1 - 1.0).abs() < 1e-10 && (mom.mass2 - 1.0).abs() < 1e-10
        }, "masses within 1e-10 of 1".into()),
    ];
    Ok(Outcome { results: serde_json::to_value(&summary)?, checks })
}

fn build_init(init: &Init, grid: &Grid1D, s: &SteadyState) -> crossdiff::Result<DensityPair> {
    match init {
        Init::Uniform { lo, hi } => {
            let rho = uniform_density(grid, *lo, *hi)?;
            DensityPair::new(*grid, rho.clone(), rho)?.recenter()
        }
        Init::AntiTranslate { shift } => {
            let rho1 = crossdiff::grid::shift_density(&s.pair.rho1, grid, -*shift);
            let rho2 = crossdiff::grid::shift_density(&s.pair.rho2, grid, *shift);
            let mut p = DensityPair::new_unchecked(*grid, rho1, rho2)?;
            let mom = p.moments();
            for r in p.rho1.iter_mut() {
                *r /= mom.mass1;
            }
            for r in p.rho2.iter_mut() {
                *r /= mom.mass2;
            }
            Ok(p)
        }
        Init::Steady => Ok(s.pair.clone()),
    }
}

fn conservation_checks(trace: &FlowTrace, grid: &Grid1D) -> Vec<Check> {
    let mass_drift = trace
        .mass1
        .iter()
        .chain(&trace.mass2)
        .map(|m| (m - 1.0).abs())
        .fold(0.0f64, f64::max);
    let com_drift = trace.m1_comb.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
    let worst_rise = trace
        .e_eps
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max);
    vec![
        Check::new("mass_conservation", mass_drift <= 1e-10, format!("max drift {mass_drift:.3e}")),
        Check::new(
            "combined_com",
            com_drift <= 10.0 * grid.dx(),
            format!("max |m1| {:.3e} vs 10 dx = {:.3e}", com_drift, 10.0 * grid.dx()),
        ),
        Check::new(
            "energy_monotone",
            worst_rise <= 1e-9,
            format!("worst rise {worst_rise:.3e}"),
        ),
    ]
}

fn run_flow_experiment(
    config: &RunConfig,
    m: &ModelSpec,
    grid: &Grid1D,
    out_dir: &Path,
) -> crossdiff::Result<Outcome> {
    let p: FlowParams = parse_params(&config.params)?;
    let s = solve_steady_auto(m, grid, p.steady_tol, 0.5)?;
    let init = build_init(&p.init, grid, &s)?;
    let cfg = FlowConfig {
        t_final: p.t_final,
        cfl_safety: p.cfl_safety,
        snapshot_every: p.snapshot_every,
        dt_max: p.dt_max,
    };
    let (trace, final_pair) = run_flow(&init, m, &s, &cfg)?;
    let window = p
        .fit_window
        .map(|w| (w[0], w[1]))
        .unwrap_or((0.2 * p.t_final, 0.8 * p.t_final));
    let fit = decay_fit(&trace, window).ok();
    write_trace_csv(&out_dir.join("trace.csv"), &trace, fit.as_ref().map(|f| (window, f)))?;
    write_profile_csv(&out_dir.join("final.csv"), &final_pair)?;
    let mut checks = conservation_checks(&trace, grid);
    if matches!(p.init, Init::Steady) {
        let gap = trace
            .e_eps
            .iter()
            .map(|e| (e - trace.e_eps[0]).abs())
            .fold(0.0f64, f64::max);
        checks.push(Check::new("flat_trace", gap <= 1e-10, format!("max |dE| {gap:.3e}")));
    }
    let mut results = serde_json::Map::new();
    results.insert("t_final".into(), json!(p.t_final));
    results.insert("steps_recorded".into(), json!(trace.len()));
    results.insert("final_energy".into(), json!(trace.e_eps.last()));
    results.insert("energy_gap_final".into(), json!(trace.e_eps.last().map(|e| e - trace.e_ref)));
    if let Some(f) = &fit {
        results.insert("rate_e".into(), json!(f.rate_e));
        results.insert("rate_l1".into(), json!(f.rate_l1));
        results.insert("r2_fit".into(), json!(f.r2_fit));
        results.insert("fit_window".into(), json!([window.0, window.1]));
    }
    Ok(Outcome { results: Value::Object(results), checks })
}

fn run_jko_experiment(
    config: &RunConfig,
    m: &ModelSpec,
    grid: &Grid1D,
    out_dir: &Path,
) -> crossdiff::Result<Outcome> {
    let p: JkoParams = parse_params(&config.params)?;
    let s = solve_steady_auto(m, grid, p.steady_tol, 0.5)?;
    let init = build_init(&p.init, grid, &s)?;
    let mut cfg = JkoConfig { tau: p.tau, m: p.m, ..JkoConfig::default() };
    cfg.opt.tol = p.tol;
    cfg.opt.max_iters = p.max_iters;
    let (trace, final_pair) = jko_run(&init, m, &cfg, p.nsteps, &s)?;
    write_trace_csv(&out_dir.join("trace.csv"), &trace, None)?;
    write_profile_csv(&out_dir.join("final.csv"), &final_pair)?;

    // Weak-residual and H^1 diagnostics over the first transitions from the
    // initial datum, where the per-step energy drop is well above the noise
    // floor; the worst transition is reported.
    let zetas = default_zeta_set(grid)?;
    let dcfg = JkoConfig { tau: p.residual_tau, ..cfg.clone() };
    let mut cur = init.clone();
    let mut worst = (0.0f64, 0.0f64, f64::INFINITY);
    let mut worst_ratio = f64::NEG_INFINITY;
    let mut h1 = None;
    for _ in 0..10 {
        let next = jko_step_pair(&cur, m, &dcfg, grid)?;
        let (r1, r2, bound) = weak_residual(&cur, &next, m, dcfg.tau, &zetas)?;
        let ratio = (r1 + r2) / bound.max(1e-300);
        if ratio > worst_ratio {
            worst_ratio = ratio;
            worst = (r1, r2, bound);
        }
        let rep = h1_diagnostics(&cur, &next, m, dcfg.tau, p.alpha)?;
        h1 = Some(match h1 {
            Some(prev) => worse_h1(prev, rep),
            None => rep,
        });
        cur = next;
    }
    let (r1, r2, bound) = worst;
    let h1 = h1.expect("at least one transition");

    let worst_rise = trace
        .e_eps
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max);
    let checks = vec![
        Check::new(
            "energy_monotone",
            worst_rise <= 1e-9,
            format!("worst rise {worst_rise:.3e}"),
        ),
        Check::new(
            "weak_residual_bound",
            r1 + r2 <= 1.05 * bound + 1e-12,
            format!("R1+R2 {:.3e} vs 1.05 bound {:.3e}", r1 + r2, 1.05 * bound),
        ),
        Check::new(
            "h1_cutoff_bound",
            h1.ratio_cut <= 1.05,
            format!("ratio {:.3e}", h1.ratio_cut),
        ),
        Check::new(
            "l2_gradient_bound",
            h1.ratio_full <= 1.05,
            format!("ratio {:.3e}", h1.ratio_full),
        ),
    ];
    let results = json!({
        "tau": cfg.tau,
        "m": cfg.m,
        "nsteps": p.nsteps,
        "final_energy": trace.e_eps.last(),
        "weak_residual": { "r1": r1, "r2": r2, "bound": bound },
        "h1": h1,
    });
    Ok(Outcome { results, checks })
}

fn worse_h1(
    a: crossdiff::jko::H1Report,
    b: crossdiff::jko::H1Report,
) -> crossdiff::jko::H1Report {
    if b.ratio_cut.max(b.ratio_full) > a.ratio_cut.max(a.ratio_full) {
        b
    } else {
        a
    }
}

fn jko_step_pair(
    p: &DensityPair,
    m: &ModelSpec,
    cfg: &JkoConfig,
    grid: &Grid1D,
) -> crossdiff::Result<DensityPair> {
    let x = crossdiff::grid::QuantilePair::from_pair(p, cfg.m)?;
    let xn = jko_step(&x, m, cfg, grid)?;
    xn.to_pair(grid)
}

struct SweepRun {
    eps: f64,
    fit: lyapunov::DecayFit,
}

fn run_sweep(
    config: &RunConfig,
    m: &ModelSpec,
    grid: &Grid1D,
    out_dir: &Path,
    quiet: bool,
) -> crossdiff::Result<Outcome> {
    let p: SweepParams = parse_params(&config.params)?;
    if p.eps_list.is_empty() {
        return Err(Error::Config("eps_list must not be empty".into()));
    }
    if p.window[1] >= p.t_final {
        return Err(Error::Config("fit window must end before t_final".into()));
    }
    let workers = std::env::var("CROSSDIFF_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or_else(|| {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        })
        .clamp(1, p.eps_list.len());

    let results: Mutex<Vec<Option<crossdiff::Result<SweepRun>>>> =
        Mutex::new((0..p.eps_list.len()).map(|_| None).collect());
    let cursor = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::SeqCst);
                if i >= p.eps_list.len() {
                    break;
                }
                let eps = p.eps_list[i];
                let res = sweep_one(m, grid, out_dir, &p, eps, quiet);
                results.lock().unwrap()[i] = Some(res);
            });
        }
    });
    let runs: Vec<SweepRun> = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("worker missed an index"))
        .collect::<crossdiff::Result<_>>()?;

    let mut csv = String::from("eps,rate_E,rate_L1\n");
    for r in &runs {
        csv.push_str(&format!("{},{:.12e},{:.12e}\n", r.eps, r.fit.rate_e, r.fit.rate_l1));
    }
    fs::write(out_dir.join("rates.csv"), csv)?;

    // Fitted degradation constant: worst slope of the rate drop over eps.
    let rate0 = runs[0].fit.rate_e;
    let lambda = m.kernel.lambda();
    let c0 = runs
        .iter()
        .filter(|r| r.eps > 0.0)
        .map(|r| ((rate0 - r.fit.rate_e) / r.eps).max(0.0))
        .fold(0.0f64, f64::max);
    let nonincreasing = runs.windows(2).all(|w| w[1].fit.rate_e <= w[0].fit.rate_e + 0.05);
    let degradation_linear = runs
        .iter()
        .all(|r| 2.0 * lambda - r.fit.rate_e <= c0 * r.eps + 0.1);
    let l1_decays = runs.iter().all(|r| r.fit.rate_l1 > 0.0);
    let checks = vec![
        Check::new(
            "rate_nonincreasing",
            nonincreasing,
            format!("rates {:?}", runs.iter().map(|r| r.fit.rate_e).collect::<Vec<_>>()),
        ),
        Check::new(
            "degradation_linear",
            degradation_linear,
            format!("2l - rate <= C0 eps + 0.1 with C0 = {c0:.3}"),
        ),
        Check::new("l1_exponential", l1_decays, "rate_L1 > 0 in every run".into()),
    ];
    let results = json!({
        "c0": c0,
        "window": p.window,
        "runs": runs.iter().map(|r| json!({
            "eps": r.eps,
            "rate_e": r.fit.rate_e,
            "rate_l1": r.fit.rate_l1,
            "r2_fit": r.fit.r2_fit,
        })).collect::<Vec<_>>(),
    });
    Ok(Outcome { results, checks })
}

fn sweep_one(
    m: &ModelSpec,
    grid: &Grid1D,
    out_dir: &Path,
    p: &SweepParams,
    eps: f64,
    quiet: bool,
) -> crossdiff::Result<SweepRun> {
    let meps = m.with_eps(eps);
    let s = solve_steady_auto(&meps, grid, p.steady_tol, 0.5)?;
    let init = build_init(&Init::default(), grid, &s)?;
    let cfg = FlowConfig {
        t_final: p.t_final,
        cfl_safety: p.cfl_safety,
        snapshot_every: p.snapshot_every,
        dt_max: p.dt_max,
    };
    let (trace, _) = run_flow(&init, &meps, &s, &cfg)?;
    let fit = decay_fit(&trace, (p.window[0], p.window[1]))?;
    let run_dir = out_dir.join(format!("runs/eps_{eps}"));
    fs::create_dir_all(&run_dir)?;
    write_trace_csv(&run_dir.join("trace.csv"), &trace, Some(((p.window[0], p.window[1]), &fit)))?;
    if !quiet {
        println!("eps = {eps}: rate_E = {:.4}, rate_L1 = {:.4}", fit.rate_e, fit.rate_l1);
    }
    Ok(SweepRun { eps, fit })
}

fn run_probes(config: &RunConfig, m: &ModelSpec, grid: &Grid1D) -> crossdiff::Result<Outcome> {
    let p: ProbesParams = parse_params(&config.params)?;
    let s = solve_steady_auto(m, grid, p.steady_tol, 0.5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let svals: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();

    let mut worst_identity = 0.0f64;
    let mut worst_floor_slack = f64::INFINITY;
    let mut worst_geo_slack = f64::INFINITY;
    let mut worst_kernel_excess = f64::NEG_INFINITY;
    let mut prev: Option<DensityPair> = None;
    for _ in 0..p.npairs {
        let pair = random_x0_pair(grid, &mut rng)?;
        let rep = lyapunov_decomposition(&pair, m, &s)?;
        worst_identity =
            worst_identity.max(rep.identity_residual / (1.0 + rep.l_gap.abs()));
        let (gap, floor) = l_convexity_floor(&pair, m, &s, p.quantiles)?;
        worst_floor_slack = worst_floor_slack.min(gap - floor);
        let (klhs, krhs) = kernel_gradient_check(&pair, m, &s, p.quantiles)?;
        worst_kernel_excess = worst_kernel_excess.max(klhs - krhs);
        if let Some(q) = &prev {
            let slack = geodesic_convexity_probe(&pair, q, m, &svals, p.quantiles)?;
            worst_geo_slack = worst_geo_slack.min(slack);
        }
        prev = Some(pair);
    }
    // Run constants over the canonical perturbation families, which are
    // reproducible across seeds to well within the regression band.
    let mut c_ck = 0.0f64;
    let mut c_n = 0.0f64;
    let mut c_hat = 0.0f64;
    for pair in canonical_pair_family(&s, &mut rng, 20)? {
        c_ck = c_ck.max(ck_check(&pair, &s, m)?);
        c_n = c_n.max(n_vs_l_check(&pair, m, &s)?);
        let (lhs, rhs) = slope_domination_probe(&pair, m, &s)?;
        if rhs > 1e-10 {
            c_hat = c_hat.max(lhs / rhs);
        }
    }
    let k0 = s.k0_estimate;
    let kappa_max = m.kappa.iter().flatten().fold(0.0f64, |a, &b| a.max(b));

    let mut checks = vec![
        Check::new(
            "decomposition_identity",
            worst_identity <= 1e-8,
            format!("worst residual ratio {worst_identity:.3e}"),
        ),
        Check::new(
            "convexity_floor",
            worst_floor_slack >= -1e-6,
            format!("min gap - floor = {worst_floor_slack:.3e}"),
        ),
        Check::new(
            "geodesic_convexity",
            worst_geo_slack >= -1e-6,
            format!("min slack {worst_geo_slack:.3e}"),
        ),
        Check::new(
            "kernel_gradient_bound",
            worst_kernel_excess <= 10.0 * grid.dx(),
            format!("max lhs - rhs = {worst_kernel_excess:.3e}"),
        ),
        Check::new(
            "ratios_finite",
            c_ck.is_finite() && c_n.is_finite() && c_hat.is_finite(),
            format!("C_CK {c_ck:.4}, C_N {c_n:.4}, C_hat {c_hat:.4}"),
        ),
    ];
    if baselines::matches_reference(m) {
        for (name, value, base) in [
            ("baseline_c_ck", c_ck, baselines::C_CK),
            ("baseline_c_n", c_n, baselines::C_N),
            ("baseline_c_hat", c_hat, baselines::C_HAT),
            ("baseline_k0", k0, baselines::K0),
            ("baseline_eps0", m.eps0_estimate, baselines::EPS0),
            ("baseline_kappa", kappa_max, baselines::KAPPA[0][1].max(baselines::KAPPA[0][0])),
        ] {
            let dev = baselines::rel_dev(value, base);
            checks.push(Check::new(
                name,
                dev <= baselines::REL_TOL,
                format!("value {value:.6e} vs baseline {base:.6e} (dev {dev:.3})"),
            ));
        }
    }
    let results = json!({
        "npairs": p.npairs,
        "estimates": {
            "c_ck": c_ck,
            "c_n": c_n,
            "c_hat": c_hat,
            "k0": k0,
            "eps0": m.eps0_estimate,
            "kappa": m.kappa,
        },
        "worst_identity_ratio": worst_identity,
        "min_floor_slack": worst_floor_slack,
        "min_geodesic_slack": worst_geo_slack,
        "max_kernel_excess": worst_kernel_excess,
    });
    Ok(Outcome { results, checks })
}

fn write_profile_csv(path: &Path, p: &DensityPair) -> crossdiff::Result<()> {
    let mut out = String::from("x,rho1,rho2\n");
    for i in 0..p.grid.n {
        out.push_str(&format!(
            "{:.12e},{:.12e},{:.12e}\n",
            p.grid.center(i),
            p.rho1[i],
            p.rho2[i]
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_trace_csv(
    path: &Path,
    trace: &FlowTrace,
    fit: Option<((f64, f64), &lyapunov::DecayFit)>,
) -> crossdiff::Result<()> {
    let mut out = String::from("t,E_eps,L_eps,N_eps,H_c,mass1,mass2,m1_comb,W2,L1err1,L1err2\n");
    for i in 0..trace.len() {
        out.push_str(&format!(
            "{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}\n",
            trace.times[i],
            trace.e_eps[i],
            trace.l_eps[i],
            trace.n_eps[i],
            trace.h_c[i],
            trace.mass1[i],
            trace.mass2[i],
            trace.m1_comb[i],
            trace.w2[i],
            trace.l1_err1[i],
            trace.l1_err2[i],
        ));
    }
    out.push_str(&format!("# e_ref={:.12e}\n# l_ref={:.12e}\n", trace.e_ref, trace.l_ref));
    if let Some(((t0, t1), f)) = fit {
        out.push_str(&format!(
            "# fit_window=[{t0},{t1}]\n# rate_E={:.12e}\n# rate_L1={:.12e}\n# r2_fit={:.12e}\n",
            f.rate_e, f.rate_l1, f.r2_fit
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic pretty JSON; serde_json object keys are ordered, so identical
/// configs and seeds yield byte-identical summaries.
fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(&sorted(v)).expect("serializable");
    s.push('\n');
    s
}

fn sorted(v: &Value) -> Value {
    match v {
        Value::Object(map) => {
            let b: BTreeMap<&String, Value> =
                map.iter().map(|(k, val)| (k, sorted(val))).collect();
            serde_json::to_value(b).expect("serializable")
        }
        Value::Array(items) => Value::Array(items.iter().map(sorted).collect()),
        other => other.clone(),
    }
}
