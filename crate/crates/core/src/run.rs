//! Batch pipelines behind the `rsjump` binary: configuration, dispatch,
//! artifacts and the run manifest.
//!
//! Exit codes: 0 success, 1 validation or assumption failure, 2 numerical
//! failure (including a time step above the stable step), 3 a verification
//! probe failed, 64 unreadable configuration or output directory.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bounds::{find_bound_controls_with, write_profiles_csv, AffineBound, BoundReport, BoundSearch, ZeroBetaPolicy};
use crate::bounds::zero_beta_policy;
use crate::error::{Error, Result};
use crate::model::{validate_model, ControlVector, MarketModel, ValidatedModel};
use crate::pide::{auto_grid, closed_form_error, solve_pide, state_independent_solution, write_grid_csv, GridPolicy, GridSpec, PideSolution, Scheme};
use crate::simulate::{doleans_check, estimate_criterion, simulate_physical, Policy, SimConfig};
use crate::verify::{
    boundary_sensitivity, cross_validate, probe_bounds, probe_comparison, probe_convexity, probe_monotonicity,
    self_convergence, taylor_probe, ProbeReport, Region, VerificationSummary,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_VERIFICATION: i32 = 3;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Validate,
    Simulate,
    Bounds,
    Solve,
    Verify,
    All,
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "validate" => Ok(Command::Validate),
            "simulate" => Ok(Command::Simulate),
            "bounds" => Ok(Command::Bounds),
            "solve" => Ok(Command::Solve),
            "verify" => Ok(Command::Verify),
            "all" => Ok(Command::All),
            other => Err(format!(
                "unknown command `{other}`; expected one of validate, simulate, bounds, solve, verify, all"
            )),
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Command::Validate => "validate",
            Command::Simulate => "simulate",
            Command::Bounds => "bounds",
            Command::Solve => "solve",
            Command::Verify => "verify",
            Command::All => "all",
        };
        f.write_str(s)
    }
}

/// A model given inline or as a path relative to the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSource {
    Path(PathBuf),
    Inline(Box<MarketModel>),
}

/// Control rule used by the simulation and Taylor pipelines.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyChoice {
    Zero,
    #[default]
    ZeroBeta,
    Constant(Vec<f64>),
    /// The `h*` field of the grid solution (solves first).
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationSettings {
    pub n_paths: usize,
    pub dt: f64,
    pub antithetic: bool,
    pub record_every: usize,
    /// Initial factor state; zeros when absent.
    pub x0: Option<Vec<f64>>,
    pub policy: PolicyChoice,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        SimulationSettings {
            n_paths: 10_000,
            dt: 1e-2,
            antithetic: false,
            record_every: 0,
            x0: None,
            policy: PolicyChoice::ZeroBeta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifySettings {
    pub convexity_samples: usize,
    pub monotonicity_samples: usize,
    /// Central fraction of each axis used by the convexity probe,
    /// cross-validation points and the boundary-sensitivity check.
    pub interior_fraction: f64,
    pub cross_points: usize,
    pub cross_paths: usize,
    pub cross_dt: f64,
    /// Allowance for scheme error in the `h = 0` dominance check and the
    /// boundary-sensitivity check.
    pub scheme_tolerance: f64,
    pub taylor_thetas: Vec<f64>,
    pub taylor_paths: usize,
    pub taylor_dt: f64,
    pub doleans_paths: usize,
    pub doleans_dt: f64,
    pub convergence_levels: usize,
    pub convergence_min_factor: f64,
    pub comparison_wealth_ratio: f64,
    pub box_enlargement: f64,
    pub closed_form_tolerance: f64,
}

impl Default for VerifySettings {
    fn default() -> Self {
        VerifySettings {
            convexity_samples: 5_000,
            monotonicity_samples: 1_000,
            interior_fraction: 0.6,
            cross_points: 10,
            cross_paths: 10_000,
            cross_dt: 2e-3,
            scheme_tolerance: 1e-3,
            taylor_thetas: vec![0.05, 0.1, 0.2],
            taylor_paths: 100_000,
            taylor_dt: 1e-2,
            doleans_paths: 20_000,
            doleans_dt: 1e-2,
            convergence_levels: 3,
            convergence_min_factor: 1.7,
            comparison_wealth_ratio: 1.5,
            box_enlargement: 1.5,
            closed_form_tolerance: 1e-3,
        }
    }
}

/// Contents of the `--config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSource,
    #[serde(default)]
    pub command: Option<Command>,
    /// Grid for the solver; derived from the model when absent.
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub simulation: SimulationSettings,
    #[serde(default)]
    pub bounds: BoundSearch,
    #[serde(default)]
    pub verify: VerifySettings,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub threads: Option<usize>,
}

impl RunConfig {
    /// Parses a config, reporting the line and column of any syntax or
    /// schema error.
    pub fn from_json_str(text: &str, origin: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("{origin}:{}:{}: {e}", e.line(), e.column())))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    /// Replaces a model path with the model it points to.
    pub fn resolve_model(&mut self, base: &Path) -> Result<()> {
        if let ModelSource::Path(p) = &self.model {
            let full = if p.is_absolute() { p.clone() } else { base.join(p) };
            let text = fs::read_to_string(&full)
                .map_err(|e| Error::Config(format!("cannot read model {}: {e}", full.display())))?;
            let model: MarketModel = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}:{}:{}: {e}", full.display(), e.line(), e.column())))?;
            self.model = ModelSource::Inline(Box::new(model));
        }
        Ok(())
    }
}

/// Command-line overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub config: PathBuf,
    pub command: Option<Command>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub seconds: f64,
    pub status: String,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: Option<Command>,
    pub config_path: String,
    pub config: Value,
    pub model_fingerprint: Option<String>,
    pub seed: u64,
    pub threads: Option<usize>,
    pub started_unix: f64,
    pub wall_seconds: f64,
    pub stages: Vec<StageRecord>,
    pub metrics: BTreeMap<String, Value>,
    pub exit_code: i32,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
}

/// Error carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: exit_code_for(&e),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

pub fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Numerical { .. } | Error::Unstable { .. } | Error::InadmissiblePolicy { .. } => EXIT_NUMERICAL,
        Error::Io(_) | Error::Json(_) => EXIT_USAGE,
        _ => EXIT_VALIDATION,
    }
}

fn blank_manifest(opts: &RunOptions) -> Manifest {
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    Manifest {
        tool: "rsjump".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: opts.command,
        config_path: opts.config.display().to_string(),
        config: Value::Null,
        model_fingerprint: None,
        seed: opts.seed.unwrap_or(0),
        threads: opts.threads,
        started_unix,
        wall_seconds: 0.0,
        stages: Vec::new(),
        metrics: BTreeMap::new(),
        exit_code: EXIT_OK,
        error: None,
    }
}

/// Records a command line that could not be interpreted (exit 64).
pub fn reject(opts: &RunOptions, message: String) -> RunOutcome {
    let mut manifest = blank_manifest(opts);
    manifest.exit_code = EXIT_USAGE;
    manifest.error = Some(message);
    finish(opts, manifest)
}

fn finish(opts: &RunOptions, mut manifest: Manifest) -> RunOutcome {
    let manifest_path = opts.out.join("manifest.json");
    let written = fs::create_dir_all(&opts.out)
        .map_err(Error::from)
        .and_then(|_| write_json(&manifest_path, &manifest));
    if let Err(e) = written {
        eprintln!("cannot write manifest {}: {e}", manifest_path.display());
        if manifest.exit_code == EXIT_OK {
            manifest.exit_code = EXIT_USAGE;
        }
    }
    RunOutcome {
        exit_code: manifest.exit_code,
        manifest,
        manifest_path,
    }
}

/// Loads the config, runs the requested pipeline and writes the manifest.
pub fn run(opts: &RunOptions) -> RunOutcome {
    let started = Instant::now();
    let mut manifest = blank_manifest(opts);
    let result = fs::create_dir_all(&opts.out)
        .map_err(|e| Failure {
            code: EXIT_USAGE,
            message: format!("cannot create output directory {}: {e}", opts.out.display()),
        })
        .and_then(|_| load_config(opts))
        .and_then(|cfg| {
            manifest.command = Some(opts.command.or(cfg.command).unwrap_or(Command::All));
            manifest.seed = opts.seed.or(cfg.seed).unwrap_or(0);
            manifest.threads = opts.threads.or(cfg.threads);
            manifest.config = serde_json::to_value(&cfg).unwrap_or(Value::Null);
            let threads = manifest.threads;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads.unwrap_or(0))
                .build()
                .map_err(|e| Failure {
                    code: EXIT_USAGE,
                    message: format!("cannot build thread pool: {e}"),
                })?;
            pool.install(|| {
                let mut p = Pipeline::new(cfg, opts.out.clone(), &mut manifest)?;
                p.dispatch()
            })
        });
    if let Err(f) = result {
        manifest.exit_code = f.code;
        manifest.error = Some(f.message);
    }
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    finish(opts, manifest)
}

fn load_config(opts: &RunOptions) -> std::result::Result<RunConfig, Failure> {
    let usage = |e: Error| Failure {
        code: EXIT_USAGE,
        message: e.to_string(),
    };
    let mut cfg = RunConfig::from_path(&opts.config).map_err(usage)?;
    let base = opts.config.parent().unwrap_or(Path::new("."));
    cfg.resolve_model(base).map_err(usage)?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(w, value)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

struct Pipeline<'m> {
    cfg: RunConfig,
    raw: MarketModel,
    out: PathBuf,
    seed: u64,
    command: Command,
    manifest: &'m mut Manifest,
    model: Option<ValidatedModel>,
    zero_beta: Option<std::result::Result<ZeroBetaPolicy, String>>,
    bounds: Option<std::result::Result<Vec<AffineBound>, String>>,
    solution: Option<PideSolution>,
}

impl<'m> Pipeline<'m> {
    fn new(cfg: RunConfig, out: PathBuf, manifest: &'m mut Manifest) -> std::result::Result<Self, Failure> {
        let raw = match &cfg.model {
            ModelSource::Inline(m) => (**m).clone(),
            ModelSource::Path(p) => {
                return Err(Failure {
                    code: EXIT_USAGE,
                    message: format!("model path {} was not resolved", p.display()),
                })
            }
        };
        manifest.model_fingerprint = Some(raw.fingerprint());
        Ok(Pipeline {
            seed: manifest.seed,
            command: manifest.command.unwrap_or(Command::All),
            cfg,
            raw,
            out,
            manifest,
            model: None,
            zero_beta: None,
            bounds: None,
            solution: None,
        })
    }

    fn dispatch(&mut self) -> std::result::Result<(), Failure> {
        match self.command {
            Command::Validate => self.stage("validate", Self::validate),
            Command::Simulate => self.stage("simulate", Self::simulate),
            Command::Bounds => self.stage("bounds", Self::bounds),
            Command::Solve => self.stage("solve", Self::solve),
            Command::Verify => self.stage("verify", Self::verify),
            Command::All => {
                self.stage("validate", Self::validate)?;
                self.stage("simulate", Self::simulate)?;
                self.stage("bounds", Self::bounds)?;
                self.stage("solve", Self::solve)?;
                self.stage("verify", Self::verify)
            }
        }
    }

    fn stage(
        &mut self,
        name: &str,
        f: fn(&mut Self) -> std::result::Result<Vec<String>, Failure>,
    ) -> std::result::Result<(), Failure> {
        let t = Instant::now();
        let result = f(self);
        let (status, outputs) = match &result {
            Ok(o) => ("ok".to_string(), o.clone()),
            Err(e) => (format!("failed (exit {}): {}", e.code, e.message), Vec::new()),
        };
        self.manifest.stages.push(StageRecord {
            name: name.into(),
            seconds: t.elapsed().as_secs_f64(),
            status,
            outputs,
        });
        result.map(|_| ())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn model(&mut self) -> std::result::Result<&ValidatedModel, Failure> {
        if self.model.is_none() {
            self.model = Some(ValidatedModel::new(self.raw.clone())?);
        }
        Ok(self.model.as_ref().unwrap())
    }

    fn zero_beta(&mut self) -> std::result::Result<std::result::Result<ZeroBetaPolicy, String>, Failure> {
        if self.zero_beta.is_none() {
            let zb = zero_beta_policy(self.model()?).map_err(|e| e.to_string());
            self.zero_beta = Some(zb);
        }
        Ok(self.zero_beta.clone().unwrap())
    }

    fn bound_controls(&mut self) -> std::result::Result<std::result::Result<Vec<AffineBound>, String>, Failure> {
        if self.bounds.is_none() {
            let search = self.cfg.bounds;
            let b = find_bound_controls_with(self.model()?, &search).map_err(|e| e.to_string());
            self.bounds = Some(b);
        }
        Ok(self.bounds.clone().unwrap())
    }

    fn grid_spec(&mut self) -> std::result::Result<GridSpec, Failure> {
        match &self.cfg.grid {
            Some(g) => Ok(g.clone()),
            None => Ok(auto_grid(self.model()?)?),
        }
    }

    fn x0(&mut self) -> std::result::Result<Vec<f64>, Failure> {
        let n = self.model()?.n_factors();
        let x0 = self.cfg.simulation.x0.clone().unwrap_or_else(|| vec![0.0; n]);
        if x0.len() != n {
            return Err(Error::Dimension(format!("x0 has length {}, model has {n} factors", x0.len())).into());
        }
        Ok(x0)
    }

    /// Constant control for the configured policy, `None` for the grid policy.
    fn constant_policy(&mut self, choice: &PolicyChoice) -> std::result::Result<Option<ControlVector>, Failure> {
        let m = self.model()?.n_assets();
        Ok(match choice {
            PolicyChoice::Zero => Some(ControlVector::zeros(m)),
            PolicyChoice::ZeroBeta => match self.zero_beta()? {
                Ok(zb) => Some(zb.h_check),
                Err(msg) => return Err(Error::Assumption(format!("zero-beta policy unavailable: {msg}")).into()),
            },
            PolicyChoice::Constant(h) => Some(ControlVector::from_slice(h)),
            PolicyChoice::Grid => None,
        })
    }

    fn validate(&mut self) -> std::result::Result<Vec<String>, Failure> {
        let report = validate_model(&self.raw)?;
        write_text(&self.path("validation.txt"), &format!("{report}\n"))?;
        write_json(&self.path("validation.json"), &report)?;
        self.manifest.metrics.insert("model_usable".into(), json!(report.usable));
        if !report.usable {
            let failed: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
            return Err(Failure {
                code: EXIT_VALIDATION,
                message: format!("model failed validation: {}", failed.join(", ")),
            });
        }
        self.model()?;
        Ok(vec!["validation.txt".into(), "validation.json".into()])
    }

    fn simulate(&mut self) -> std::result::Result<Vec<String>, Failure> {
        let s = self.cfg.simulation.clone();
        let cfg = SimConfig {
            n_paths: s.n_paths,
            dt: s.dt,
            seed: self.seed,
            antithetic: s.antithetic,
            record_every: s.record_every,
        };
        let x0 = self.x0()?;
        let constant = self.constant_policy(&s.policy)?;
        if constant.is_none() && self.solution.is_none() {
            self.solve()?;
        }
        let model = self.model.as_ref().unwrap();
        let bundle = match &constant {
            Some(h) => simulate_physical(model, h, &x0, &cfg)?,
            None => {
                let sol = self.solution.as_ref().unwrap();
                simulate_physical(model, &GridPolicy::new(&sol.values.spec, &sol.policy), &x0, &cfg)?
            }
        };
        let mut outputs = vec!["paths_terminal.csv".to_string(), "simulation.json".to_string()];
        bundle.write_terminal_csv(BufWriter::new(File::create(self.path("paths_terminal.csv"))?))?;
        if s.record_every > 0 {
            bundle.write_trajectories_csv(BufWriter::new(File::create(self.path("trajectories.csv"))?))?;
            outputs.push("trajectories.csv".into());
        }
        let criterion = estimate_criterion(&bundle, model.theta())?;
        let chi = doleans_check(&bundle)?;
        let summary = json!({
            "policy": s.policy,
            "x0": x0,
            "summary": bundle.summary(),
            "criterion": criterion,
            "doleans_mean": chi,
        });
        write_json(&self.path("simulation.json"), &summary)?;
        self.manifest.metrics.insert("criterion_estimate".into(), json!(criterion));
        Ok(outputs)
    }

    fn bounds(&mut self) -> std::result::Result<Vec<String>, Failure> {
        let zb = self.zero_beta()?;
        let bounds = self.bound_controls()?;
        let horizon = self.model()?.horizon();
        let mut text = String::new();
        match &zb {
            Ok(z) => text += &format!("zero-beta control {:?}, g = {:.10e}\n", z.h_check.as_slice(), z.g_check),
            Err(e) => text += &format!("zero-beta control unavailable: {e}\n"),
        }
        let mut outputs = vec!["bounds.txt".to_string(), "bounds.json".to_string()];
        let bounds_json = match &bounds {
            Ok(b) => {
                text += &BoundReport(b).to_string();
                let times: Vec<f64> = (0..101).map(|i| horizon * i as f64 / 100.0).collect();
                write_profiles_csv(b, &times, BufWriter::new(File::create(self.path("bounds_profiles.csv"))?))?;
                outputs.push("bounds_profiles.csv".into());
                json!(b
                    .iter()
                    .map(|b| json!({
                        "component": b.component,
                        "sign": b.sign,
                        "h_bar": b.h_bar.as_slice(),
                        "loading": b.profile.loading().as_slice(),
                        "sign_margin": b.sign_margin(),
                        "alpha_0": b.alpha(0.0),
                        "beta_0": b.beta(0.0).as_slice(),
                    }))
                    .collect::<Vec<_>>())
            }
            Err(e) => {
                text += &format!("bound controls unavailable: {e}\n");
                json!({ "error": e })
            }
        };
        let zb_json = match &zb {
            Ok(z) => json!({ "h_check": z.h_check.as_slice(), "g_check": z.g_check }),
            Err(e) => json!({ "error": e }),
        };
        write_text(&self.path("bounds.txt"), &text)?;
        write_json(&self.path("bounds.json"), &json!({ "zero_beta": zb_json, "bounds": bounds_json }))?;
        if self.command == Command::Bounds {
            if let Err(message) = zb.and(bounds) {
                return Err(Failure { code: EXIT_VALIDATION, message });
            }
        }
        Ok(outputs)
    }

    fn solve(&mut self) -> std::result::Result<Vec<String>, Failure> {
        let spec = self.grid_spec()?;
        self.model()?;
        let model = self.model.as_ref().unwrap();
        let sol = solve_pide(model, &spec)?;
        let exact = state_independent_solution(model)?;
        write_grid_csv(&sol.values, Some(&sol.policy), BufWriter::new(File::create(self.out.join("grid.csv"))?))?;
        write_json(&self.out.join("solve_report.json"), &json!({ "grid": spec, "report": sol.report }))?;
        self.manifest.metrics.insert("solve_report".into(), json!(sol.report));
        if let Some(exact) = exact {
            let err = closed_form_error(&sol.values, &exact)?;
            self.manifest.metrics.insert("closed_form_max_error".into(), json!(err));
        }
        self.solution = Some(sol);
        Ok(vec!["grid.csv".into(), "solve_report.json".into()])
    }

    fn verify(&mut self) -> std::result::Result<Vec<String>, Failure> {
        if self.solution.is_none() {
            self.solve()?;
        }
        let zb = self.zero_beta()?.ok();
        let bounds = self.bound_controls()?.unwrap_or_default();
        let x0 = self.x0()?;
        let taylor_policy = match self.constant_policy(&self.cfg.simulation.policy.clone()) {
            Ok(Some(h)) => h,
            _ => ControlVector::zeros(self.model()?.n_assets()),
        };
        let v = self.cfg.verify.clone();
        let seed = self.seed;
        let model = self.model.as_ref().unwrap();
        let sol = self.solution.as_ref().unwrap();
        let spec = &sol.values.spec;
        let interior = Region::central(spec, v.interior_fraction);
        let phi = crate::pide::phi_from_tilde(&sol.values)?;
        let mut summary = VerificationSummary::default();
        let mut details = serde_json::Map::new();

        summary.push(probe_convexity(spec, &phi, v.convexity_samples, seed ^ 0xc0, Some(&interior)));
        summary.push(probe_bounds(&sol.values, &bounds, zb.as_ref(), model.risk(), None));
        let scheme = Scheme::new(model, spec)?;
        summary.push(probe_monotonicity(&scheme, &sol.values, v.monotonicity_samples, seed ^ 0x30));
        let wealth = model.initial_wealth();
        summary.push(probe_comparison(model, spec, wealth, wealth * v.comparison_wealth_ratio)?);

        let coarse = coarsened(spec, v.convergence_levels);
        let conv = self_convergence(model, &coarse, v.convergence_levels, &Region::central(&coarse, v.interior_fraction), v.convergence_min_factor)?;
        summary.push(conv.report.clone());
        details.insert("self_convergence".into(), json!(conv));

        let sensitivity = boundary_sensitivity(model, spec, v.box_enlargement, &interior)?;
        summary.push(threshold_report("boundary_sensitivity", sensitivity, v.scheme_tolerance));

        if let Some(exact) = state_independent_solution(model)? {
            let err = closed_form_error(&sol.values, &exact)?;
            summary.push(threshold_report("closed_form", err, v.closed_form_tolerance));
        }

        let chi_cfg = SimConfig { n_paths: v.doleans_paths, dt: v.doleans_dt, seed: seed.wrapping_add(17), antithetic: false, record_every: 0 };
        let chi = doleans_check(&simulate_physical(model, &taylor_policy, &x0, &chi_cfg)?)?;
        summary.push(threshold_report("doleans", (chi.value - 1.0).abs(), 3.0 * chi.std_error + 1e-12));
        details.insert("doleans".into(), json!(chi));

        let points = cross_points(spec, &interior, v.cross_points, model.horizon());
        let cross_cfg = SimConfig { n_paths: v.cross_paths, dt: v.cross_dt, seed: seed.wrapping_add(1000), antithetic: true, record_every: 0 };
        let cv = cross_validate(model, sol, &points, &cross_cfg, v.scheme_tolerance)?;
        summary.push(cv.agreement.clone());
        summary.push(cv.dominance.clone());
        details.insert("cross_validation".into(), json!(cv));

        let taylor_cfg = SimConfig { n_paths: v.taylor_paths, dt: v.taylor_dt, seed: seed.wrapping_add(2000), antithetic: false, record_every: 0 };
        let taylor = taylor_probe(model, &taylor_policy as &dyn Policy, &x0, &v.taylor_thetas, &taylor_cfg)?;
        summary.push(taylor.report.clone());
        details.insert("taylor".into(), json!(taylor));

        write_text(&self.path("verification.txt"), &format!("{summary}\n"))?;
        write_json(&self.path("verification.json"), &json!({ "summary": summary, "passed": summary.passed(), "details": details }))?;
        self.manifest.metrics.insert("verification_passed".into(), json!(summary.passed()));
        if !summary.passed() {
            let failed: Vec<&str> = summary.failures().map(|p| p.name.as_str()).collect();
            return Err(Failure {
                code: EXIT_VERIFICATION,
                message: format!("verification probes failed: {}", failed.join(", ")),
            });
        }
        Ok(vec!["verification.txt".into(), "verification.json".into()])
    }
}

fn threshold_report(name: &str, value: f64, limit: f64) -> ProbeReport {
    let margin = limit - value;
    ProbeReport {
        name: name.into(),
        points: 1,
        violations: usize::from(!(margin >= 0.0)),
        worst_margin: margin,
        passed: margin >= 0.0,
        detail: format!("value {value:.3e}, limit {limit:.3e}"),
    }
}

/// Coarsest grid of a nested sequence whose last level is `spec`.
fn coarsened(spec: &GridSpec, levels: usize) -> GridSpec {
    let div = 1usize << (levels.saturating_sub(1));
    let axes = spec
        .axes
        .iter()
        .map(|a| crate::pide::Axis::new(a.x_min, a.x_max, ((a.nodes - 1) / div).max(2) + 1))
        .collect();
    GridSpec { axes, dt: None, ..spec.clone() }
}

/// `count` nodes spread along the diagonal of the region, alternating
/// between `t = 0` and `t = T/2`.
fn cross_points(spec: &GridSpec, region: &Region, count: usize, horizon: f64) -> Vec<(f64, Vec<f64>)> {
    (0..count)
        .map(|i| {
            let s = if count > 1 { i as f64 / (count - 1) as f64 } else { 0.5 };
            let x: Vec<f64> = region.lower.iter().zip(&region.upper).map(|(lo, hi)| lo + s * (hi - lo)).collect();
            let x = spec.coords(spec.nearest_node(&x));
            let t = if i % 2 == 0 { 0.0 } else { 0.5 * horizon };
            (t, x)
        })
        .collect()
}
