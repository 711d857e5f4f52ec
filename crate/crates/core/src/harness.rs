//! Monte Carlo experiments: seeded trials over a grid of sampling ratios,
//! aggregated statistics, and comparison with the asymptotic predictions.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{
    critical_ratios, linear_rho_limit, one_bit_predict, parametric_rho, predict, AsymptoticPrediction, Phase,
};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, ZSModel};
use crate::quadrature::{base_moments, QuadratureRule};
use crate::spectral::{cosine_sq, estimate_norm_phase, top_two_eigenpairs_with, EigenResult};

/// Rows accumulated per matrix product when forming the data matrix.
const CHUNK_ROWS: usize = 1024;
/// Side of the square tiles of the data matrix; only the lower triangle of
/// tiles is computed.
const TILE: usize = 512;

fn tiles(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).step_by(TILE).map(move |a| (a, (a + TILE).min(n)))
}

/// Adds `B Bᵀ` to the lower tiles of `d`, where the columns of `b` are rows
/// of the weighted sensing matrix.
fn add_gram_lower(d: &mut DMatrix<f64>, b: &DMatrix<f64>) {
    let n = d.nrows();
    let t = b.transpose();
    for (i0, i1) in tiles(n) {
        for (j0, j1) in tiles(n).take_while(|&(j0, _)| j0 <= i0) {
            d.view_mut((i0, j0), (i1 - i0, j1 - j0)).gemm(1.0, &b.rows(i0, i1 - i0), &t.columns(j0, j1 - j0), 1.0);
        }
    }
}

/// Copies the lower triangle (plus diagonal tiles) into the upper one.
fn mirror_lower(d: &mut DMatrix<f64>) {
    let n = d.nrows();
    for j in 0..n {
        for i in j + 1..n {
            d[(j, i)] = d[(i, j)];
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ensemble {
    #[default]
    Gaussian,
    Rademacher,
}

/// Source of the prediction columns attached to sweep statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    /// General fixed-point solver.
    #[default]
    FixedPoint,
    /// Closed form for models with `z ∈ {0, 1}`.
    OneBit,
    /// `ρ` read off the parametric curve; eigenvalues from the fixed point.
    Parametric,
}

fn default_eig_tol() -> f64 {
    1e-8
}

fn default_max_iter() -> usize {
    2000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub n: usize,
    pub alpha_grid: Vec<f64>,
    pub trials: usize,
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
    /// Worker threads; `None` uses the global pool.
    #[serde(default)]
    pub threads: Option<usize>,
}

impl ExperimentConfig {
    pub fn new(model: ModelSpec, n: usize, alpha_grid: Vec<f64>, trials: usize) -> Self {
        ExperimentConfig {
            model,
            n,
            alpha_grid,
            trials,
            ensemble: Ensemble::Gaussian,
            seed: 0,
            eig_tol: default_eig_tol(),
            max_iter: default_max_iter(),
            predictor: Predictor::FixedPoint,
            threads: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!("n must be at least 2, got {}", self.n)));
        }
        if self.trials < 1 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.alpha_grid.is_empty() {
            return Err(Error::Config("alpha grid is empty".into()));
        }
        for &a in &self.alpha_grid {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Config(format!("alpha must be positive, got {a}")));
            }
            if self.m_for(a) < 1 {
                return Err(Error::Config(format!("alpha = {a} gives no measurements at n = {}", self.n)));
            }
        }
        if !(self.eig_tol > 0.0) {
            return Err(Error::Config(format!("eig_tol must be positive, got {}", self.eig_tol)));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    /// `m = round(α n)`.
    pub fn m_for(&self, alpha: f64) -> usize {
        (alpha * self.n as f64).round() as usize
    }
}

/// `count` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) || count == 0 {
        return Err(Error::Config(format!("bad log grid [{lo}, {hi}] with {count} points")));
    }
    if count == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..count).map(|k| (a + (b - a) * k as f64 / (count - 1) as f64).exp()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub alpha: f64,
    pub m: usize,
    pub rho_spectral: f64,
    pub rho_linear: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub eigengap: f64,
    pub iterations: usize,
    pub residual: f64,
    pub norm_estimate: Option<f64>,
    pub seed: u64,
    pub alpha_index: usize,
    pub trial_index: usize,
    /// Every preprocessed value was zero.
    pub degenerate: bool,
    pub converged: bool,
}

impl TrialResult {
    pub fn is_defect(&self) -> bool {
        self.degenerate || !self.converged
    }
}

/// Random stream for one trial, independent of execution order.
pub fn trial_rng(seed: u64, alpha_index: usize, trial_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((alpha_index as u64) << 32) | trial_index as u64);
    rng
}

fn fill_row(ensemble: Ensemble, row: &mut [f64], rng: &mut ChaCha8Rng) {
    match ensemble {
        Ensemble::Gaussian => row.iter_mut().for_each(|v| *v = StandardNormal.sample(rng)),
        Ensemble::Rademacher => row.iter_mut().for_each(|v| *v = if rng.gen::<bool>() { 1.0 } else { -1.0 }),
    }
}

/// One trial at `config.alpha_grid[alpha_index]`. Solver non-convergence is
/// recorded in the result rather than returned as an error.
pub fn run_trial(config: &ExperimentConfig, model: &ZSModel, alpha_index: usize, trial_index: usize) -> Result<TrialResult> {
    let alpha = *config
        .alpha_grid
        .get(alpha_index)
        .ok_or_else(|| Error::Config(format!("alpha index {alpha_index} outside the grid")))?;
    let n = config.n;
    let m = config.m_for(alpha);
    let mut rng = trial_rng(config.seed, alpha_index, trial_index);

    let mut direction: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    direction.iter_mut().for_each(|v| *v /= norm);

    // Rows with z > 0, scaled by √z, are stored as columns of `chunk`.
    let mut chunk = DMatrix::<f64>::zeros(n, CHUNK_ROWS.min(m).max(1));
    let mut filled = 0usize;
    let mut d = DMatrix::<f64>::zeros(n, n);
    let mut linear = vec![0.0; n];
    let mut ys = Vec::with_capacity(if model.is_quadratic_measurement() { m } else { 0 });
    let mut active = 0usize;
    let mut row = vec![0.0; n];
    let flush = |d: &mut DMatrix<f64>, chunk: &DMatrix<f64>, cols: usize| add_gram_lower(d, &chunk.columns(0, cols).into_owned());
    for _ in 0..m {
        fill_row(config.ensemble, &mut row, &mut rng);
        let s: f64 = row.iter().zip(&direction).map(|(a, u)| a * u).sum();
        let (y, z) = model.sample_zy(s, &mut rng);
        if model.is_quadratic_measurement() {
            ys.push(y);
        }
        if z > 0.0 {
            active += 1;
            linear.iter_mut().zip(&row).for_each(|(l, a)| *l += z * a);
            let w = z.sqrt();
            chunk.column_mut(filled).iter_mut().zip(&row).for_each(|(c, a)| *c = w * a);
            filled += 1;
            if filled == chunk.ncols() {
                flush(&mut d, &chunk, filled);
                filled = 0;
            }
        } else if z < 0.0 {
            return Err(Error::AssumptionViolated(format!("preprocessed value {z} is negative")));
        }
    }
    if filled > 0 {
        flush(&mut d, &chunk, filled);
    }
    let norm_estimate = if model.is_quadratic_measurement() { Some(estimate_norm_phase(&ys)?) } else { None };

    let mut result = TrialResult {
        alpha,
        m,
        rho_spectral: 0.0,
        rho_linear: 0.0,
        lambda1: 0.0,
        lambda2: 0.0,
        eigengap: 0.0,
        iterations: 0,
        residual: 0.0,
        norm_estimate,
        seed: config.seed,
        alpha_index,
        trial_index,
        degenerate: active == 0,
        converged: true,
    };
    if active == 0 {
        return Ok(result);
    }
    d /= m as f64;
    mirror_lower(&mut d);
    let eig: EigenResult = match top_two_eigenpairs_with(&d, config.eig_tol, config.max_iter) {
        Ok(r) => r,
        Err(Error::NotConverged(r)) => {
            result.converged = false;
            *r
        }
        Err(e) => return Err(e),
    };
    result.rho_spectral = cosine_sq(&direction, &eig.x1)?;
    result.rho_linear = cosine_sq(&direction, &linear).unwrap_or(0.0);
    result.lambda1 = eig.lambda1;
    result.lambda2 = eig.lambda2;
    result.eigengap = eig.lambda1 - eig.lambda2;
    result.iterations = eig.iterations;
    result.residual = eig.residual;
    Ok(result)
}

/// Mean, standard deviation (n − 1 denominator) and standard error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub stderr: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let k = values.len();
        if k == 0 {
            return Summary { mean: f64::NAN, std: f64::NAN, stderr: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / k as f64;
        let std = if k > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt()
        } else {
            0.0
        };
        Summary { mean, std, stderr: std / (k as f64).sqrt() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionColumns {
    pub rho: f64,
    pub rho_linear: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub phase: Phase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaStats {
    pub alpha: f64,
    pub m: usize,
    pub trials: usize,
    pub n: usize,
    pub rho: Summary,
    pub rho_linear: Summary,
    pub lambda1: Summary,
    pub lambda2: Summary,
    pub eigengap: Summary,
    pub iterations_mean: f64,
    pub norm_estimate: Option<Summary>,
    pub defects: usize,
    pub prediction: PredictionColumns,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepStats {
    pub model: String,
    pub ensemble: Ensemble,
    pub seed: u64,
    pub per_alpha: Vec<AlphaStats>,
}

/// Prediction columns for every grid point.
pub fn predictions(model: &ZSModel, rule: &QuadratureRule, predictor: Predictor, grid: &[f64]) -> Result<Vec<PredictionColumns>> {
    let report = match predictor {
        Predictor::Parametric => Some(critical_ratios(model, rule)?),
        _ => None,
    };
    let base = match predictor {
        Predictor::OneBit => Some(base_moments(model, rule)?),
        _ => None,
    };
    grid.iter()
        .map(|&alpha| {
            let p: AsymptoticPrediction = match (&base, predictor) {
                (Some(b), _) => one_bit_predict(b.c, b.d, alpha)?,
                _ => predict(model, rule, alpha)?,
            };
            let rho = match &report {
                Some(r) => parametric_rho(model, rule, r, alpha)?,
                None => p.rho_limit,
            };
            Ok(PredictionColumns {
                rho,
                rho_linear: linear_rho_limit(model, rule, alpha)?,
                lambda1: p.lambda1_limit,
                lambda2: p.lambda2_limit,
                phase: p.phase,
            })
        })
        .collect()
}

/// All trials of the sweep, ordered by α index then trial index.
pub fn run_trials(config: &ExperimentConfig, model: &ZSModel) -> Result<Vec<TrialResult>> {
    config.validate()?;
    let jobs: Vec<(usize, usize)> =
        (0..config.alpha_grid.len()).flat_map(|a| (0..config.trials).map(move |t| (a, t))).collect();
    let work = || jobs.par_iter().map(|&(a, t)| run_trial(config, model, a, t)).collect::<Result<Vec<_>>>();
    match config.threads {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    }
}

/// Aggregates trials (grouped by α index) and attaches predictions.
pub fn aggregate(config: &ExperimentConfig, model: &ZSModel, trials: &[TrialResult], predicted: &[PredictionColumns]) -> SweepStats {
    let per_alpha = config
        .alpha_grid
        .iter()
        .enumerate()
        .map(|(i, &alpha)| {
            let rows: Vec<&TrialResult> = trials.iter().filter(|r| r.alpha_index == i).collect();
            let col = |f: fn(&TrialResult) -> f64| Summary::of(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
            let norms: Vec<f64> = rows.iter().filter_map(|r| r.norm_estimate).collect();
            AlphaStats {
                alpha,
                m: config.m_for(alpha),
                trials: rows.len(),
                n: config.n,
                rho: col(|r| r.rho_spectral),
                rho_linear: col(|r| r.rho_linear),
                lambda1: col(|r| r.lambda1),
                lambda2: col(|r| r.lambda2),
                eigengap: col(|r| r.eigengap),
                iterations_mean: col(|r| r.iterations as f64).mean,
                norm_estimate: (!norms.is_empty()).then(|| Summary::of(&norms)),
                defects: rows.iter().filter(|r| r.is_defect()).count(),
                prediction: predicted[i],
            }
        })
        .collect();
    SweepStats { model: model.name().to_string(), ensemble: config.ensemble, seed: config.seed, per_alpha }
}

/// Runs every trial and aggregates.
pub fn sweep(config: &ExperimentConfig, rule: &QuadratureRule) -> Result<SweepStats> {
    config.validate()?;
    let model = config.model.build()?;
    let predicted = predictions(&model, rule, config.predictor, &config.alpha_grid)?;
    let trials = run_trials(config, &model)?;
    Ok(aggregate(config, &model, &trials, &predicted))
}

/// `|z| ≤ 3` band used by [`compare`].
pub const Z_BAND: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaComparison {
    pub alpha: f64,
    pub z_rho: f64,
    pub z_lambda1: f64,
    pub z_lambda2: f64,
    /// Zero spread with a nonzero deviation in some column.
    pub zero_std_flag: bool,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<AlphaComparison>,
    pub passed: usize,
    pub pass_rate: f64,
}

impl ComparisonReport {
    pub fn passes(&self, min_rate: f64) -> bool {
        self.pass_rate >= min_rate
    }
}

/// `(mean − prediction)/stderr`; infinite when the spread vanishes but the
/// deviation does not.
pub fn z_score(s: &Summary, prediction: f64) -> (f64, bool) {
    let dev = s.mean - prediction;
    if s.stderr > 0.0 {
        (dev / s.stderr, false)
    } else if dev == 0.0 {
        (0.0, false)
    } else {
        (dev.signum() * f64::INFINITY, true)
    }
}

pub fn compare(stats: &SweepStats) -> ComparisonReport {
    let rows: Vec<AlphaComparison> = stats
        .per_alpha
        .iter()
        .map(|a| {
            let (z_rho, f1) = z_score(&a.rho, a.prediction.rho);
            let (z_lambda1, f2) = z_score(&a.lambda1, a.prediction.lambda1);
            let (z_lambda2, f3) = z_score(&a.lambda2, a.prediction.lambda2);
            let pass = [z_rho, z_lambda1, z_lambda2].iter().all(|z| z.abs() <= Z_BAND);
            AlphaComparison { alpha: a.alpha, z_rho, z_lambda1, z_lambda2, zero_std_flag: f1 || f2 || f3, pass }
        })
        .collect();
    let passed = rows.iter().filter(|r| r.pass).count();
    let pass_rate = if rows.is_empty() { 0.0 } else { passed as f64 / rows.len() as f64 };
    ComparisonReport { rows, passed, pass_rate }
}

/// One output record per grid point; field order is the CSV column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub trials: usize,
    pub n: usize,
    pub rho_mean: f64,
    pub rho_std: f64,
    pub rho_pred: f64,
    pub rho_linear_mean: f64,
    pub rho_linear_pred: f64,
    pub lam1_mean: f64,
    pub lam1_std: f64,
    pub lam1_pred: f64,
    pub lam2_mean: f64,
    pub lam2_std: f64,
    pub lam2_pred: f64,
    pub gap_mean: f64,
    pub iters_mean: f64,
    pub defects: usize,
    pub rho_se: f64,
    pub lam1_se: f64,
    pub lam2_se: f64,
}

pub const CSV_HEADER: [&str; 20] = [
    "alpha",
    "trials",
    "n",
    "rho_mean",
    "rho_std",
    "rho_pred",
    "rho_linear_mean",
    "rho_linear_pred",
    "lam1_mean",
    "lam1_std",
    "lam1_pred",
    "lam2_mean",
    "lam2_std",
    "lam2_pred",
    "gap_mean",
    "iters_mean",
    "defects",
    "rho_se",
    "lam1_se",
    "lam2_se",
];

impl SweepRow {
    fn fields(&self) -> Vec<String> {
        let f = |v: f64| format!("{v}");
        vec![
            f(self.alpha),
            self.trials.to_string(),
            self.n.to_string(),
            f(self.rho_mean),
            f(self.rho_std),
            f(self.rho_pred),
            f(self.rho_linear_mean),
            f(self.rho_linear_pred),
            f(self.lam1_mean),
            f(self.lam1_std),
            f(self.lam1_pred),
            f(self.lam2_mean),
            f(self.lam2_std),
            f(self.lam2_pred),
            f(self.gap_mean),
            f(self.iters_mean),
            self.defects.to_string(),
            f(self.rho_se),
            f(self.lam1_se),
            f(self.lam2_se),
        ]
    }
}

impl SweepStats {
    pub fn rows(&self) -> Vec<SweepRow> {
        self.per_alpha
            .iter()
            .map(|a| SweepRow {
                alpha: a.alpha,
                trials: a.trials,
                n: a.n,
                rho_mean: a.rho.mean,
                rho_std: a.rho.std,
                rho_pred: a.prediction.rho,
                rho_linear_mean: a.rho_linear.mean,
                rho_linear_pred: a.prediction.rho_linear,
                lam1_mean: a.lambda1.mean,
                lam1_std: a.lambda1.std,
                lam1_pred: a.prediction.lambda1,
                lam2_mean: a.lambda2.mean,
                lam2_std: a.lambda2.std,
                lam2_pred: a.prediction.lambda2,
                gap_mean: a.eigengap.mean,
                iters_mean: a.iterations_mean,
                defects: a.defects,
                rho_se: a.rho.stderr,
                lam1_se: a.lambda1.stderr,
                lam2_se: a.lambda2.stderr,
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = CSV_HEADER.join(",");
        out.push('\n');
        for row in self.rows() {
            out.push_str(&row.fields().join(","));
            out.push('\n');
        }
        out
    }
}
