//! Command-line runner.
//!
//! Every subcommand accepts the same flag set plus `--config FILE`; flags
//! override fields read from the file. Each run writes `run.json` (the
//! merged configuration, the results and a metadata block) and any CSV
//! artifacts into `--out` (default `spinlab-out`), and prints the results
//! JSON on stdout.

use crate::core_model::{random_on_sphere, Hamiltonian, Mixture, Point, DEFAULT_TENSOR_BUDGET};
use crate::ensembles::{sample_ensemble, target_overlap_matrix, CorrelationLadder, OverlapLadder, TreeShape};
use crate::error::{Error, Result};
use crate::ogp_lab::{
    check_chi_properties, constrained_grand_max, estimate_chi, overlap_concentration, run_branching_experiment,
    BranchingConfig, ChiConfig, GrandMaxConfig,
};
use crate::optimizers::{
    amp, gradient_ascent, langevin, subag_ascent, AmpSpec, InitialLaw, LangevinConfig, Nonlinearity, PiecewiseLinear,
    Region, SubagMode, Trajectory,
};
use crate::parisi::{alg_is_profile, alg_sp, opt_sp_numeric, parisi_is, parisi_sp, phi_value, PdeGrid, PiecewiseZeta};
use crate::rng::{self, label};
use crate::selftest;
use crate::ultrametric::{
    branching_depth, embed_energy_greedy, embed_orthogonal, validate_embedding, vd_set, DatedRootedTree,
};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::PathBuf;

const DEFAULT_OUT: &str = "spinlab-out";
const EMBED_TOL: f64 = 1e-9;
/// Exit status when a selftest criterion fails.
pub const EXIT_SELFTEST: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "spinlab", version, about = "Spin-glass thresholds, optimizers and branching overlap experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Spherical and Ising thresholds for a mixture.
    Thresholds(Invocation),
    /// Run an optimizer on sampled instances and record trajectories.
    Optimize(Invocation),
    /// Estimate the overlap profile chi(p) of an algorithm.
    Chi(Invocation),
    /// Overlap concentration over correlated pairs.
    Concentration(Invocation),
    /// Branching experiment on a correlated tree ensemble.
    Branching(Invocation),
    /// Constrained grand maximum with threshold references.
    Sandwich(Invocation),
    /// Embed a dated rooted tree from a JSON file.
    Embed(Invocation),
    /// Evaluate the Parisi PDE solution at given points.
    Pde(Invocation),
    /// Run the built-in acceptance checks.
    Selftest(Invocation),
}

impl Command {
    fn parts(&self) -> (&'static str, &Invocation) {
        match self {
            Command::Thresholds(i) => ("thresholds", i),
            Command::Optimize(i) => ("optimize", i),
            Command::Chi(i) => ("chi", i),
            Command::Concentration(i) => ("concentration", i),
            Command::Branching(i) => ("branching", i),
            Command::Sandwich(i) => ("sandwich", i),
            Command::Embed(i) => ("embed", i),
            Command::Pde(i) => ("pde", i),
            Command::Selftest(i) => ("selftest", i),
        }
    }
}

#[derive(Debug, Args)]
struct Invocation {
    /// JSON configuration file; flags take precedence over its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: ExperimentConfig,
}

/// Every tunable of every subcommand. Absent fields take per-command defaults.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Subcommand the file is meant for; checked against the invoked one.
    #[arg(skip)]
    pub subcommand: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<String>,
    /// `p4`, `sk`, or comma-separated `degree:gamma` pairs such as `2:0.7,4:0.5`.
    #[arg(long)]
    pub mixture: Option<String>,
    /// External field.
    #[arg(long, allow_negative_numbers = true)]
    pub h: Option<f64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of independent instances.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Tensor entry budget per Hamiltonian.
    #[arg(long)]
    pub budget: Option<usize>,
    /// gradient, subag, subag-random, langevin, amp, constant or linear.
    #[arg(long)]
    pub alg: Option<String>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// `ball` or `cube`.
    #[arg(long)]
    pub region: Option<String>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// Grid size for the spherical threshold solvers.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Knots for the Ising algorithmic threshold; computed only when given.
    #[arg(long)]
    pub knots: Option<usize>,
    /// PDE spatial step.
    #[arg(long)]
    pub dx: Option<f64>,
    /// Step values of zeta on a uniform grid of [0, 1).
    #[arg(long, value_delimiter = ',')]
    pub zeta: Option<Vec<f64>>,
    #[arg(long, allow_negative_numbers = true)]
    pub a: Option<f64>,
    /// Spherical Lagrange parameter for the Parisi functional.
    #[arg(long)]
    pub b: Option<f64>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub x: Option<Vec<f64>>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub p_grid: Option<Vec<f64>>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub swap: Option<bool>,
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub ps: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub qs: Option<Vec<f64>>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub chi1: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub extend: Option<bool>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Tree JSON file for `embed`.
    #[arg(long)]
    pub tree: Option<String>,
    /// Energy-greedy embedding instead of the orthogonal one.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub greedy: Option<bool>,
    /// Selftest criterion ids; all when absent.
    #[arg(long, value_delimiter = ',')]
    pub criteria: Option<Vec<usize>>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($f:ident),* $(,)?) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl ExperimentConfig {
    /// Parses a configuration file, naming the offending field on failure.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Argument(format!("config field `{path}`: {}", e.inner()))
        })
    }

    /// Fields set in `other` replace those in `self`.
    pub fn overlay(&mut self, other: &ExperimentConfig) {
        overlay!(self, other;
            subcommand, out, mixture, h, n, seed, seeds, budget, alg, delta, steps, lr, region, radius,
            beta, horizon, dt, grid, knots, dx, zeta, a, b, x, p, p_grid, reps, lambda, swap, ks, ps, qs,
            eta, chi1, extend, restarts, iters, tree, greedy, criteria);
    }

    /// JSON echo with unset fields dropped.
    pub fn echo(&self) -> Value {
        let mut v = serde_json::to_value(self).unwrap_or(Value::Null);
        if let Value::Object(map) = &mut v {
            map.retain(|_, x| !x.is_null());
        }
        v
    }

    fn mixture(&self) -> Result<Mixture> {
        parse_mixture(self.mixture.as_deref().unwrap_or("p2"), self.h.unwrap_or(0.0))
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn n(&self, default: usize) -> usize {
        self.n.unwrap_or(default)
    }

    fn budget(&self) -> usize {
        self.budget.unwrap_or(DEFAULT_TENSOR_BUDGET)
    }

    fn pde_grid(&self, m: &Mixture) -> Result<PdeGrid> {
        let g = PdeGrid::for_mixture(m);
        match self.dx {
            Some(dx) => g.with_dx(dx),
            None => Ok(g),
        }
    }

    fn zeta(&self) -> Result<PiecewiseZeta> {
        match &self.zeta {
            Some(v) if !v.is_empty() => PiecewiseZeta::uniform(v.clone()),
            _ => Ok(PiecewiseZeta::zero()),
        }
    }

    fn region(&self) -> Result<Region> {
        let r = self.radius.unwrap_or(1.0);
        match self.region.as_deref().unwrap_or("ball") {
            "ball" => Ok(Region::Ball(r)),
            "cube" => Ok(Region::Cube(r)),
            other => Err(Error::Argument(format!("unknown region `{other}`; use ball or cube"))),
        }
    }

    fn tree_parts(&self) -> Result<(TreeShape, CorrelationLadder, OverlapLadder)> {
        let ks = self.ks.clone().unwrap_or_else(|| vec![2, 2]);
        let d = ks.len();
        let ps = self.ps.clone().unwrap_or_else(|| (0..=d).map(|i| i as f64 / d as f64).collect());
        let qs = self.qs.clone().unwrap_or_else(|| (0..=d).map(|i| i as f64 / d as f64).collect());
        Ok((TreeShape::new(ks)?, CorrelationLadder::new(ps)?, OverlapLadder::new(qs)?))
    }
}

/// `p4` is the pure 4-spin model, `sk` has `xi(q) = q^2 / 2`, and
/// `2:0.7,4:0.5` lists `degree:gamma` pairs.
pub fn parse_mixture(spec: &str, h: f64) -> Result<Mixture> {
    let spec = spec.trim();
    if spec.eq_ignore_ascii_case("sk") {
        return Mixture::new(&[(2, std::f64::consts::FRAC_1_SQRT_2)], h);
    }
    if let Some(p) = spec.strip_prefix('p') {
        let p: u32 = p.parse().map_err(|_| Error::Argument(format!("bad mixture `{spec}`")))?;
        return Mixture::pure(p, h);
    }
    let mut gammas = Vec::new();
    for part in spec.split(',').filter(|s| !s.trim().is_empty()) {
        let (p, g) = part
            .split_once(':')
            .ok_or_else(|| Error::Argument(format!("mixture term `{part}` is not degree:gamma")))?;
        let p: u32 = p.trim().parse().map_err(|_| Error::Argument(format!("bad degree in `{part}`")))?;
        let g: f64 = g.trim().parse().map_err(|_| Error::Argument(format!("bad gamma in `{part}`")))?;
        gammas.push((p, g));
    }
    Mixture::new(&gammas, h)
}

struct Outcome {
    results: Value,
    files: Vec<(String, String)>,
    exit: i32,
}

impl Outcome {
    fn new(results: Value) -> Self {
        Outcome { results, files: Vec::new(), exit: 0 }
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let (name, inv) = cli.command.parts();
    match execute(name, inv) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(name: &str, inv: &Invocation) -> Result<i32> {
    let mut cfg = match &inv.config {
        Some(path) => ExperimentConfig::from_json(&std::fs::read_to_string(path)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = &cfg.subcommand {
        if s != name {
            return Err(Error::Argument(format!("config is for `{s}`, not `{name}`")));
        }
    }
    cfg.overlay(&inv.flags);
    cfg.subcommand = Some(name.to_string());
    let out = match name {
        "thresholds" => thresholds(&cfg)?,
        "optimize" => optimize(&cfg)?,
        "chi" => chi(&cfg)?,
        "concentration" => concentration(&cfg)?,
        "branching" => branching(&cfg)?,
        "sandwich" => sandwich(&cfg)?,
        "embed" => embed(&cfg)?,
        "pde" => pde(&cfg)?,
        _ => run_selftest(&cfg)?,
    };
    let dir = PathBuf::from(cfg.out.as_deref().unwrap_or(DEFAULT_OUT));
    std::fs::create_dir_all(&dir)?;
    for (file, body) in &out.files {
        std::fs::write(dir.join(file), body)?;
    }
    let since = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let doc = json!({
        "subcommand": name,
        "config": cfg.echo(),
        "results": out.results,
        "metadata": { "version": env!("CARGO_PKG_VERSION"), "unix_time": since },
    });
    std::fs::write(dir.join("run.json"), pretty(&doc))?;
    if name != "selftest" {
        say(&pretty(&out.results));
    }
    Ok(out.exit)
}

/// Stdout line that tolerates a closed pipe.
fn say(line: &str) {
    use std::io::Write as _;
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).unwrap_or_default()
}

// ---------------------------------------------------------------- thresholds and PDE

fn thresholds(cfg: &ExperimentConfig) -> Result<Outcome> {
    let m = cfg.mixture()?;
    let grid = cfg.grid.unwrap_or(64);
    let mut res = json!({
        "alg_sp": alg_sp(&m),
        "opt_sp": opt_sp_numeric(&m, grid)?,
    });
    if let Some(knots) = cfg.knots {
        let r = alg_is_profile(&m, knots, cfg.pde_grid(&m)?)?;
        res["alg_is"] = json!({ "value": r.value, "zeta": r.zeta, "sweeps": r.sweeps });
    }
    if cfg.zeta.is_some() {
        let z = cfg.zeta()?;
        res["parisi_is"] = json!(parisi_is(&z, &m, cfg.pde_grid(&m)?)?);
        if let Some(b) = cfg.b {
            res["parisi_sp"] = json!(parisi_sp(b, &z, &m)?);
        }
    }
    Ok(Outcome::new(res))
}

fn pde(cfg: &ExperimentConfig) -> Result<Outcome> {
    let m = cfg.mixture()?;
    let z = cfg.zeta()?;
    let a = cfg.a.unwrap_or(0.0);
    let beta = cfg.beta.unwrap_or(f64::INFINITY);
    let grid = cfg.pde_grid(&m)?;
    let xs = cfg.x.clone().unwrap_or_else(|| vec![m.h()]);
    let mut csv = String::from("x,phi\n");
    let mut vals = Vec::with_capacity(xs.len());
    for &x in &xs {
        let v = phi_value(&m, &z, a, beta, x, grid)?;
        let _ = writeln!(csv, "{x:?},{v:?}");
        vals.push(v);
    }
    let mut out = Outcome::new(json!({ "x": xs, "phi": vals, "a": a, "beta": beta_json(beta), "grid": grid }));
    out.files.push(("pde.csv".into(), csv));
    Ok(out)
}

fn beta_json(beta: f64) -> Value {
    if beta.is_finite() {
        json!(beta)
    } else {
        json!("inf")
    }
}

// ---------------------------------------------------------------- algorithms

fn trajectory(cfg: &ExperimentConfig, spec: Option<&AmpSpec>, h: &Hamiltonian, seed: u64) -> Result<Trajectory> {
    let alg = cfg.alg.as_deref().unwrap_or("gradient");
    match alg {
        "gradient" => {
            let mut r = rng::stream(seed, &[label::INIT]);
            let x0 = random_on_sphere(h.n(), 0.5 * cfg.radius.unwrap_or(1.0), &mut r);
            gradient_ascent(h, &x0, cfg.steps.unwrap_or(200), &[cfg.lr.unwrap_or(0.1)], cfg.region()?)
        }
        "subag" | "subag-random" => {
            let mode = if alg == "subag" { SubagMode::TopEig } else { SubagMode::RandomSubspace };
            subag_ascent(h, cfg.delta.unwrap_or(0.05), mode, seed, None)
        }
        "langevin" => langevin(
            h,
            &LangevinConfig {
                beta: cfg.beta.unwrap_or(2.0),
                horizon: cfg.horizon.unwrap_or(1.0),
                dt: cfg.dt.unwrap_or(0.01),
                region: cfg.region()?,
                seed,
                noiseless: false,
            },
        ),
        "amp" => {
            let spec = spec.ok_or_else(|| Error::Argument("AMP nonlinearity table missing".into()))?;
            Ok(amp(h, spec, seed)?.trajectory)
        }
        other => Err(Error::Argument(format!("`{other}` has no trajectory; use gradient, subag, subag-random, langevin or amp"))),
    }
}

/// Linear AMP: `f_0` is the identity on a Rademacher start and each later
/// step rescales the newest iterate to unit second moment.
fn amp_spec(cfg: &ExperimentConfig, m: &Mixture) -> Result<AmpSpec> {
    let t = cfg.steps.unwrap_or(5).max(1);
    let d = m.xi1(1.0);
    let scale = if d > 0.0 { 1.0 / d.sqrt() } else { 1.0 };
    let f = (0..t)
        .map(|k| {
            let mut coeffs = vec![0.0; k + 1];
            coeffs[k] = if k == 0 { 1.0 } else { scale };
            Nonlinearity { coeffs, rho: PiecewiseLinear::identity() }
        })
        .collect();
    AmpSpec::new(f, InitialLaw::Rademacher)
}

type BoxedAlgorithm<'a> = Box<dyn Fn(&Hamiltonian, u64) -> Result<Point> + Sync + 'a>;

fn algorithm<'a>(cfg: &'a ExperimentConfig, m: &Mixture) -> Result<(String, BoxedAlgorithm<'a>)> {
    let name = cfg.alg.clone().unwrap_or_else(|| "gradient".into());
    let alg: BoxedAlgorithm<'a> = match name.as_str() {
        "constant" => Box::new(|h: &Hamiltonian, _| Ok(Point::from_element(h.n(), 0.5))),
        "linear" => Box::new(|h: &Hamiltonian, s| {
            let mut r = rng::stream(s, &[label::INIT]);
            let x0 = random_on_sphere(h.n(), 1.0, &mut r);
            Ok(h.field_free_gradient(&x0)? * 0.5)
        }),
        "amp" => {
            let spec = amp_spec(cfg, m)?;
            Box::new(move |h: &Hamiltonian, s| Ok(trajectory(cfg, Some(&spec), h, s)?.output))
        }
        _ => {
            cfg.region()?;
            Box::new(move |h: &Hamiltonian, s| Ok(trajectory(cfg, None, h, s)?.output))
        }
    };
    Ok((name, alg))
}

fn optimize(cfg: &ExperimentConfig) -> Result<Outcome> {
    let m = cfg.mixture()?;
    let n = cfg.n(64);
    let k = cfg.seeds.unwrap_or(1);
    if k == 0 {
        return Err(Error::Argument("seeds must be at least 1".into()));
    }
    let spec = match cfg.alg.as_deref() {
        Some("amp") => Some(amp_spec(cfg, &m)?),
        _ => None,
    };
    let mut out = Outcome::new(Value::Null);
    let mut runs = Vec::with_capacity(k);
    let mut total = 0.0;
    for i in 0..k {
        let hs = rng::derive(cfg.seed(), &[label::REPLICA, i as u64]);
        let asd = rng::derive(cfg.seed(), &[label::STEP, i as u64]);
        let h = Hamiltonian::sample(&m, n, hs, cfg.budget())?;
        let t = trajectory(cfg, spec.as_ref(), &h, asd)?;
        total += t.final_energy_per_n();
        let mut s = t.summary();
        s["disorder_seed"] = json!(hs);
        s["file"] = json!(format!("trajectory_{i}.csv"));
        out.files.push((format!("trajectory_{i}.csv"), t.to_csv(None)));
        runs.push(s);
    }
    out.results = json!({
        "n": n,
        "runs": runs,
        "mean_final_energy_per_n": total / k as f64,
        "alg_sp": alg_sp(&m).value,
    });
    Ok(out)
}

// ---------------------------------------------------------------- overlap experiments

fn chi(cfg: &ExperimentConfig) -> Result<Outcome> {
    let m = cfg.mixture()?;
    let (name, alg) = algorithm(cfg, &m)?;
    let ccfg = ChiConfig {
        n: cfg.n(32),
        p_grid: cfg.p_grid.clone().unwrap_or_else(|| vec![0.0, 0.25, 0.5, 0.75, 1.0]),
        reps: cfg.reps.unwrap_or(50),
        seed: cfg.seed(),
        swap: cfg.swap.unwrap_or(false),
    };
    let est = estimate_chi(alg.as_ref(), &name, &m, &ccfg)?;
    let report = check_chi_properties(&est)?;
    let mut csv = String::from("p,chi,se\n");
    for j in 0..est.p_grid.len() {
        let _ = writeln!(csv, "{:?},{:?},{:?}", est.p_grid[j], est.chi[j], est.se[j]);
    }
    let mut out = Outcome::new(json!({ "estimate": est, "report": report }));
    out.files.push(("chi.csv".into(), csv));
    Ok(out)
}

fn concentration(cfg: &ExperimentConfig) -> Result<Outcome> {
    let m = cfg.mixture()?;
    let (name, alg) = algorithm(cfg, &m)?;
    let c = overlap_concentration(
        alg.as_ref(),
        &m,
        cfg.n(32),
        cfg.p.unwrap_or(0.5),
        cfg.reps.unwrap_or(30),
        cfg.lambda.unwrap_or(0.05),
        cfg.seed(),
    )?;
    let mut csv = String::from("rep,overlap\n");
    for (i, r) in c.overlaps.iter().enumerate() {
        let _ = writeln!(csv, "{i},{r:?}");
    }
    let mut out = Outcome::new(json!({ "algorithm": name, "concentration": c }));
    out.files.push(("overlaps.csv".into(), csv));
    Ok(out)
}

fn branching(cfg: &ExperimentConfig) -> Result<Outcome> {
    let m = cfg.mixture()?;
    let (name, alg) = algorithm(cfg, &m)?;
    let (shape, p, q) = cfg.tree_parts()?;
    let bcfg = BranchingConfig {
        n: cfg.n(32),
        shape,
        p,
        q,
        eta: cfg.eta.unwrap_or(0.1),
        reps: cfg.reps.unwrap_or(5),
        seed: cfg.seed(),
        chi1: cfg.chi1.unwrap_or(1.0),
        extend: cfg.extend.unwrap_or(false),
    };
    let rep = run_branching_experiment(alg.as_ref(), &m, &bcfg)?;
    let mut csv = String::from("rep,seed,max_dev,grand_energy\n");
    for (i, r) in rep.runs.iter().enumerate() {
        let _ = writeln!(csv, "{i},{},{:?},{:?}", r.seed, r.max_dev, r.grand_energy);
    }
    let mut out = Outcome::new(json!({ "algorithm": name, "report": rep }));
    out.files.push(("branching.csv".into(), csv));
    Ok(out)
}

fn sandwich(cfg: &ExperimentConfig) -> Result<Outcome> {
    let m = cfg.mixture()?;
    let (shape, p, q) = cfg.tree_parts()?;
    let n = cfg.n(32);
    let shape_leaves = shape.num_leaves();
    let k = shape_leaves as f64;
    let ens = sample_ensemble(&m, n, &shape, &p, cfg.seed())?;
    let target = target_overlap_matrix(&shape, &q)?;
    let q0 = q.qs()[0];
    let centre = if q0 > 0.0 {
        random_on_sphere(n, q0.sqrt(), &mut rng::stream(cfg.seed(), &[label::INIT]))
    } else {
        Point::zeros(n)
    };
    let gcfg = GrandMaxConfig {
        eta: cfg.eta.unwrap_or(0.1),
        restarts: cfg.restarts.unwrap_or(8),
        seed: cfg.seed(),
        iters: cfg.iters.unwrap_or(200),
        lr: cfg.lr.unwrap_or(0.05),
    };
    let g = constrained_grand_max(&ens, &target, &centre, &gcfg)?;
    let mut csv = String::from("restart,grand_energy\n");
    for (i, e) in g.per_restart.iter().enumerate() {
        match e {
            Some(v) => writeln!(csv, "{i},{v:?}"),
            None => writeln!(csv, "{i},"),
        }
        .ok();
    }
    let a = alg_sp(&m).value;
    let o = opt_sp_numeric(&m, cfg.grid.unwrap_or(64))?;
    let mut out = Outcome::new(json!({
        "leaves": shape_leaves,
        "lower": g.best,
        "lower_per_leaf": g.best.map(|b| b / k),
        "feasible_restarts": g.feasible_restarts,
        "k_alg_sp": k * a,
        "k_opt_sp": k * o,
    }));
    out.files.push(("sandwich.csv".into(), csv));
    Ok(out)
}

// ---------------------------------------------------------------- trees

fn embed(cfg: &ExperimentConfig) -> Result<Outcome> {
    let path = cfg.tree.as_deref().ok_or_else(|| Error::Argument("embed needs --tree FILE".into()))?;
    let t = DatedRootedTree::from_json(&std::fs::read_to_string(path)?)?;
    let n = cfg.n(t.len() + 1);
    let mut res = json!({});
    let emb = if cfg.greedy.unwrap_or(false) {
        let m = cfg.mixture()?;
        let h = Hamiltonian::sample(&m, n, cfg.seed(), cfg.budget())?;
        let g = embed_energy_greedy(&h, &t, cfg.delta.unwrap_or(0.05))?;
        res["energies"] = json!(g.energies);
        res["reference"] = json!(g.reference);
        res["steps"] = json!(g.steps);
        g.embedding
    } else {
        embed_orthogonal(&t, n, cfg.seed())?
    };
    let v = validate_embedding(&t, &emb, EMBED_TOL);
    res["n"] = json!(n);
    res["validation"] = json!(v);
    res["branching_depth"] = json!(branching_depth(&t));
    res["vd_set"] = json!(vd_set(&t).into_iter().map(|i| t.id(i)).collect::<Vec<_>>());
    let mut out = Outcome::new(res);
    out.files.push(("embedding.csv".into(), emb.to_csv(&t)));
    if !v.valid {
        return Err(Error::Numeric(format!("embedding failed validation, worst {}", v.worst)));
    }
    Ok(out)
}

// ---------------------------------------------------------------- selftest

fn run_selftest(cfg: &ExperimentConfig) -> Result<Outcome> {
    let ids: Vec<usize> = match &cfg.criteria {
        Some(v) => v.clone(),
        None => selftest::CRITERIA.iter().map(|c| c.0).collect(),
    };
    let mut lines = Vec::new();
    let mut failed = Vec::new();
    for id in ids {
        let o = selftest::run(id).ok_or_else(|| Error::Argument(format!("no criterion {id}")))?;
        say(&o.line());
        if !o.pass {
            failed.push(id);
        }
        lines.push(json!({ "id": o.id, "name": o.name, "pass": o.pass, "detail": o.detail }));
    }
    let mut out = Outcome::new(json!({ "criteria": lines, "failed": failed }));
    if !failed.is_empty() {
        out.exit = EXIT_SELFTEST;
    }
    Ok(out)
}
