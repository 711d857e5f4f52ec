//! Command implementations behind the `glmspec` binary.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use glm_spectral::asymptotics::{critical_ratios, predict, AsymptoticPrediction, PhaseReport};
use glm_spectral::harness::{self, log_grid, Ensemble, ExperimentConfig, Predictor};
use glm_spectral::model::{validate, ModelSpec};
use glm_spectral::quadrature::{gauss_hermite, QuadratureRule, DEFAULT_ORDER};
use glm_spectral::spectral::oracle_check;
use glm_spectral::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_CHECK_FAILED: i32 = 4;

/// Sweep acceptance: fraction of grid points inside the `|z| ≤ 3` band.
pub const STRICT_PASS_RATE: f64 = 0.9;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Solver(String),
    Io(String),
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => EXIT_IO,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Solver(_) => EXIT_SOLVER,
            CliError::CheckFailed(_) => EXIT_CHECK_FAILED,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Solver(m) => write!(f, "solver failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::CheckFailed(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidParameter(_) | Error::AssumptionViolated(_) | Error::OrderOutOfRange(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Solver(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn default_n() -> usize {
    2048
}

fn default_trials() -> usize {
    16
}

fn default_eig_tol() -> f64 {
    1e-8
}

fn default_max_iter() -> usize {
    2000
}

fn default_order() -> usize {
    DEFAULT_ORDER
}

fn default_dir() -> String {
    ".".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_steps: Option<usize>,
    #[serde(default)]
    pub ensemble: Ensemble,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eig_tol")]
    pub eig_tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub predictor: Predictor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default = "default_order")]
    pub quadrature_order: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix: Option<String>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: default_dir(), prefix: None }
    }
}

/// Contents of a configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl FileConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn rule(&self) -> CliResult<QuadratureRule> {
        Ok(gauss_hermite(self.experiment.quadrature_order)?)
    }

    /// Fixes the α grid to an explicit list: flags, then `alpha_grid`, then
    /// `alpha_min`/`alpha_max`/`alpha_steps`, then a default spanning
    /// `[0.3 α_c,min, 4 α_c,max]` with 12 points.
    fn resolve_grid(&mut self, rule: &QuadratureRule) -> CliResult<()> {
        let e = &mut self.experiment;
        let grid = match (&e.alpha_grid, e.alpha_min, e.alpha_max) {
            (Some(g), _, _) => g.clone(),
            (None, Some(lo), Some(hi)) => log_grid(lo, hi, e.alpha_steps.unwrap_or(12))?,
            (None, None, None) => {
                let model = self.model.build()?;
                let report = critical_ratios(&model, rule)?;
                log_grid(0.3 * report.alpha_c_min, 4.0 * report.alpha_c_max, e.alpha_steps.unwrap_or(12))?
            }
            _ => return Err(CliError::Config("alpha_min and alpha_max must be given together".into())),
        };
        if grid.is_empty() || grid.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(CliError::Config(format!("alpha grid must be nonempty and positive, got {grid:?}")));
        }
        e.alpha_grid = Some(grid);
        e.alpha_min = None;
        e.alpha_max = None;
        e.alpha_steps = None;
        Ok(())
    }

    pub fn experiment_config(&self) -> ExperimentConfig {
        let e = &self.experiment;
        ExperimentConfig {
            model: self.model.clone(),
            n: e.n,
            alpha_grid: e.alpha_grid.clone().unwrap_or_default(),
            trials: e.trials,
            ensemble: e.ensemble,
            seed: e.seed,
            eig_tol: e.eig_tol,
            max_iter: e.max_iter,
            predictor: e.predictor,
            threads: e.threads,
        }
    }

    fn output_path(&self, command: &str, suffix: &str) -> PathBuf {
        let prefix = self.output.prefix.clone().unwrap_or_else(|| command.to_string());
        Path::new(&self.output.dir).join(format!("{prefix}{suffix}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: Option<FileConfig>,
    pub arguments: serde_json::Value,
    pub seed: Option<u64>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<String>,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

#[derive(Parser, Debug)]
#[command(name = "glmspec", version, about = "Spectral initialization for generalized linear measurements: predictions, phase transitions and Monte Carlo checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default, Clone)]
pub struct GridFlags {
    /// Smallest sampling ratio of a log-spaced grid.
    #[arg(long)]
    pub alpha_min: Option<f64>,
    /// Largest sampling ratio of a log-spaced grid.
    #[arg(long)]
    pub alpha_max: Option<f64>,
    /// Number of grid points.
    #[arg(long)]
    pub alpha_steps: Option<usize>,
    /// Output directory, overriding the config.
    #[arg(long)]
    pub out_dir: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Asymptotic predictions over a grid of sampling ratios.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        grid: GridFlags,
    },
    /// Zero crossings and critical sampling ratios.
    Phase {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated thresholds for an α_c versus t table.
        #[arg(long, value_delimiter = ',')]
        sweep_t: Option<Vec<f64>>,
        #[arg(long)]
        out_dir: Option<String>,
    },
    /// Monte Carlo sweep compared against the predictions.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        grid: GridFlags,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        /// Exit with status 4 when fewer than 90% of grid points pass.
        #[arg(long)]
        strict: bool,
    },
    /// Arrowhead fixed point against dense eigendecompositions.
    OracleCheck {
        #[arg(long, value_delimiter = ',', default_values_t = vec![20usize, 50, 100])]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        /// Added to the top-left entry of every view (negative test).
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        perturb_a: f64,
        #[arg(long, default_value = ".")]
        out_dir: String,
    },
    /// Numeric report on the model assumptions.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<String>,
    },
}

struct Run {
    command: &'static str,
    started: f64,
    outputs: Vec<String>,
}

impl Run {
    fn new(command: &'static str) -> Self {
        Run { command, started: unix_now(), outputs: Vec::new() }
    }

    fn write(&mut self, path: &Path, contents: &str) -> CliResult<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::Io(format!("{}: {e}", parent.display())))?;
        }
        fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.outputs.push(path.display().to_string());
        Ok(())
    }

    fn finish(
        mut self,
        manifest_path: &Path,
        config: Option<FileConfig>,
        arguments: serde_json::Value,
    ) -> CliResult<RunManifest> {
        let seed = config.as_ref().map(|c| c.experiment.seed);
        self.outputs.push(manifest_path.display().to_string());
        let manifest = RunManifest {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            arguments,
            seed,
            started_unix: self.started,
            finished_unix: unix_now(),
            outputs: self.outputs.clone(),
        };
        let text = to_json(&manifest)?;
        fs::write(manifest_path, text).map_err(|e| CliError::Io(format!("{}: {e}", manifest_path.display())))?;
        Ok(manifest)
    }
}

fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string_pretty(value).map(|s| s + "\n").map_err(|e| CliError::Io(e.to_string()))
}

fn apply_grid_flags(cfg: &mut FileConfig, grid: &GridFlags) -> CliResult<()> {
    match (grid.alpha_min, grid.alpha_max) {
        (Some(lo), Some(hi)) => {
            let steps = grid.alpha_steps.unwrap_or(12);
            cfg.experiment.alpha_grid = Some(log_grid(lo, hi, steps)?);
        }
        (None, None) => {
            if let Some(steps) = grid.alpha_steps {
                cfg.experiment.alpha_steps = Some(steps);
            }
        }
        _ => return Err(CliError::Config("--alpha-min and --alpha-max must be given together".into())),
    }
    if let Some(dir) = &grid.out_dir {
        cfg.output.dir = dir.clone();
    }
    Ok(())
}

fn predictions_csv(rows: &[AsymptoticPrediction]) -> String {
    let mut out = String::from("alpha,lambda_star,rho,lambda1,lambda2,phase,phi_prime\n");
    for p in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.alpha, p.lambda_star, p.rho_limit, p.lambda1_limit, p.lambda2_limit, p.phase, p.phi_prime_at_star
        ));
    }
    out
}

pub fn cmd_predict(config: &Path, grid: &GridFlags) -> CliResult<RunManifest> {
    let mut cfg = FileConfig::load(config)?;
    apply_grid_flags(&mut cfg, grid)?;
    let rule = cfg.rule()?;
    cfg.resolve_grid(&rule)?;
    let model = cfg.model.build()?;
    let mut run = Run::new("predict");
    let rows = cfg
        .experiment
        .alpha_grid
        .as_ref()
        .expect("grid resolved")
        .iter()
        .map(|&a| predict(&model, &rule, a))
        .collect::<Result<Vec<_>, _>>()?;
    run.write(&cfg.output_path("predict", ".csv"), &predictions_csv(&rows))?;
    run.write(&cfg.output_path("predict", ".json"), &to_json(&rows)?)?;
    let manifest = cfg.output_path("predict", ".manifest.json");
    run.finish(&manifest, Some(cfg), serde_json::Value::Null)
}

/// α_c of one threshold value, or the reason it is unavailable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub t: f64,
    pub alpha_c_min: Option<f64>,
    pub alpha_c_max: Option<f64>,
    pub thresholds: usize,
    pub status: String,
}

pub fn threshold_table(model: &ModelSpec, rule: &QuadratureRule, ts: &[f64]) -> CliResult<Vec<ThresholdRow>> {
    ts.iter()
        .map(|&t| {
            let spec = model
                .with_threshold(t)
                .ok_or_else(|| CliError::Config("--sweep-t needs a trimming or subset model".into()))?;
            let report = spec.build().and_then(|m| critical_ratios(&m, rule));
            Ok(match report {
                Ok(r) => ThresholdRow {
                    t,
                    alpha_c_min: Some(r.alpha_c_min),
                    alpha_c_max: Some(r.alpha_c_max),
                    thresholds: r.alpha_c.len(),
                    status: "ok".into(),
                },
                Err(e) => ThresholdRow { t, alpha_c_min: None, alpha_c_max: None, thresholds: 0, status: e.to_string() },
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn threshold_csv(rows: &[ThresholdRow]) -> String {
    let mut out = String::from("t,alpha_c_min,alpha_c_max,thresholds,status\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},\"{}\"\n",
            r.t,
            opt(r.alpha_c_min),
            opt(r.alpha_c_max),
            r.thresholds,
            r.status.replace('"', "'")
        ));
    }
    out
}

pub fn phase_csv(report: &PhaseReport) -> String {
    let mut out = String::from("index,lambda_c,alpha_c\n");
    for (i, (l, a)) in report.zeros.iter().zip(&report.alpha_c).enumerate() {
        out.push_str(&format!("{},{l},{a}\n", i + 1));
    }
    out
}

pub fn cmd_phase(config: &Path, sweep_t: Option<&[f64]>, out_dir: Option<&str>) -> CliResult<RunManifest> {
    let mut cfg = FileConfig::load(config)?;
    if let Some(dir) = out_dir {
        cfg.output.dir = dir.to_string();
    }
    let rule = cfg.rule()?;
    let model = cfg.model.build()?;
    let mut run = Run::new("phase");
    let report = critical_ratios(&model, &rule)?;
    run.write(&cfg.output_path("phase", ".json"), &to_json(&report)?)?;
    run.write(&cfg.output_path("phase", ".csv"), &phase_csv(&report))?;
    print!("{}", phase_csv(&report));
    let mut arguments = serde_json::Value::Null;
    if let Some(ts) = sweep_t {
        let rows = threshold_table(&cfg.model, &rule, ts)?;
        run.write(&cfg.output_path("phase", "_sweep_t.csv"), &threshold_csv(&rows))?;
        run.write(&cfg.output_path("phase", "_sweep_t.json"), &to_json(&rows)?)?;
        print!("{}", threshold_csv(&rows));
        arguments = serde_json::json!({ "sweep_t": ts });
    }
    let manifest = cfg.output_path("phase", ".manifest.json");
    run.finish(&manifest, Some(cfg), arguments)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_sweep(
    config: &Path,
    grid: &GridFlags,
    n: Option<usize>,
    trials: Option<usize>,
    seed: Option<u64>,
    threads: Option<usize>,
    strict: bool,
) -> CliResult<RunManifest> {
    let mut cfg = FileConfig::load(config)?;
    apply_grid_flags(&mut cfg, grid)?;
    if let Some(n) = n {
        cfg.experiment.n = n;
    }
    if let Some(t) = trials {
        cfg.experiment.trials = t;
    }
    if let Some(s) = seed {
        cfg.experiment.seed = s;
    }
    if let Some(t) = threads {
        cfg.experiment.threads = Some(t);
    }
    let rule = cfg.rule()?;
    cfg.resolve_grid(&rule)?;
    let experiment = cfg.experiment_config();
    experiment.validate()?;
    let mut run = Run::new("sweep");
    let stats = harness::sweep(&experiment, &rule)?;
    let report = harness::compare(&stats);
    run.write(&cfg.output_path("sweep", ".csv"), &stats.to_csv())?;
    run.write(&cfg.output_path("sweep", ".json"), &to_json(&stats.rows())?)?;
    run.write(&cfg.output_path("sweep", "_compare.json"), &to_json(&report)?)?;
    for r in &report.rows {
        println!(
            "alpha={:<10.4} z_rho={:>7.2} z_lambda1={:>7.2} z_lambda2={:>7.2} {}",
            r.alpha,
            r.z_rho,
            r.z_lambda1,
            r.z_lambda2,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    println!("{}/{} grid points within {} standard errors", report.passed, report.rows.len(), harness::Z_BAND);
    let manifest = cfg.output_path("sweep", ".manifest.json");
    let manifest = run.finish(&manifest, Some(cfg), serde_json::json!({ "strict": strict }))?;
    if strict && !report.passes(STRICT_PASS_RATE) {
        return Err(CliError::CheckFailed(format!(
            "pass rate {:.3} below {STRICT_PASS_RATE}",
            report.pass_rate
        )));
    }
    Ok(manifest)
}

pub fn cmd_oracle_check(dims: &[usize], seeds: u64, perturb_a: f64, out_dir: &str) -> CliResult<RunManifest> {
    let mut run = Run::new("oracle-check");
    let report = oracle_check(dims, seeds, perturb_a)?;
    let dir = Path::new(out_dir);
    run.write(&dir.join("oracle_check.json"), &to_json(&report)?)?;
    println!(
        "{} cases, {} failed, max |dλ₁| = {:.3e}, max cos² error = {:.3e}",
        report.cases.len(),
        report.failed,
        report.max_lambda_err,
        report.max_cos_sq_err
    );
    let arguments = serde_json::json!({ "dims": dims, "seeds": seeds, "perturb_a": perturb_a });
    let manifest = run.finish(&dir.join("oracle_check.manifest.json"), None, arguments)?;
    if report.pass() {
        Ok(manifest)
    } else {
        Err(CliError::CheckFailed(format!("{} of {} oracle cases mismatched", report.failed, report.cases.len())))
    }
}

pub fn cmd_validate(config: &Path, out_dir: Option<&str>) -> CliResult<RunManifest> {
    let mut cfg = FileConfig::load(config)?;
    if let Some(dir) = out_dir {
        cfg.output.dir = dir.to_string();
    }
    let rule = cfg.rule()?;
    let model = cfg.model.build()?;
    let mut run = Run::new("validate");
    let report = validate(&model, &rule)?;
    let text = to_json(&report)?;
    print!("{text}");
    run.write(&cfg.output_path("validate", ".json"), &text)?;
    let manifest = cfg.output_path("validate", ".manifest.json");
    let ok = report.pos_corr_ok;
    let manifest = run.finish(&manifest, Some(cfg), serde_json::Value::Null)?;
    if ok {
        Ok(manifest)
    } else {
        Err(CliError::CheckFailed(report.notes.join("; ")))
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Predict { config, grid } => cmd_predict(config, grid).and_then(|m| {
            let csv = fs::read_to_string(&m.outputs[0]).map_err(|e| CliError::Io(format!("{}: {e}", m.outputs[0])))?;
            print!("{csv}");
            Ok(m)
        }),
        Command::Phase { config, sweep_t, out_dir } => cmd_phase(config, sweep_t.as_deref(), out_dir.as_deref()),
        Command::Sweep { config, grid, n, trials, seed, threads, strict } => {
            cmd_sweep(config, grid, *n, *trials, *seed, *threads, *strict)
        }
        Command::OracleCheck { dims, seeds, perturb_a, out_dir } => cmd_oracle_check(dims, *seeds, *perturb_a, out_dir),
        Command::Validate { config, out_dir } => cmd_validate(config, out_dir.as_deref()),
    };
    match result {
        Ok(_) => EXIT_OK,
        Err(e) => {
            eprintln!("glmspec: {e}");
            e.exit_code()
        }
    }
}
