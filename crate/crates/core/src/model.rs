//! Acquisition models and the induced joint law of `(z, s)`.
//!
//! A model couples a conditional kernel `y | κs` with a preprocessing map
//! `z = T(y)` bounded in `[0, τ]`, where `s ~ N(0, 1)` is the normalized
//! projection of a sensing vector onto the target direction. Everything
//! downstream only needs `E[h(z) | s]`, which [`ZSModel::cond_expect`]
//! provides for each kernel class.
//!
//! Besides the kernel itself, every model carries a [`SignalLayout`]
//! telling the expectation engine how smooth `s ↦ E[h(z) | s]` is. Models
//! whose conditional law of `z` is piecewise constant in `s` (the subset
//! and quantizer models) expose their cells so that expectations reduce to
//! Gaussian CDF arithmetic.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{self, QuadratureRule};

pub type ScalarMap = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
/// Writes `P(y = y_k | x)` into the output slice, one entry per outcome.
pub type ProbabilityMap = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;
pub type Sampler = Arc<dyn Fn(f64, &mut dyn RngCore) -> f64 + Send + Sync>;

/// Maximum number of outcomes of a finite discrete kernel.
pub const MAX_OUTCOMES: usize = 16;

/// Inner sample count used by sampled kernels unless overridden.
pub const DEFAULT_INNER_SAMPLES: usize = 10_000;

/// Conditional law of the raw measurement `y` given the noiseless
/// projection `x = κs`.
#[derive(Clone)]
pub enum ConditionalKernel {
    Deterministic(ScalarMap),
    FiniteDiscrete {
        outcomes: Vec<f64>,
        probabilities: ProbabilityMap,
    },
    /// Arbitrary noisy kernel. `seed` makes quadrature over the inner
    /// sample averages reproducible.
    Sampled {
        sampler: Sampler,
        inner_samples: usize,
        seed: u64,
    },
}

impl fmt::Debug for ConditionalKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConditionalKernel::Deterministic(_) => f.write_str("Deterministic"),
            ConditionalKernel::FiniteDiscrete { outcomes, .. } => f
                .debug_struct("FiniteDiscrete")
                .field("outcomes", outcomes)
                .finish(),
            ConditionalKernel::Sampled { inner_samples, seed, .. } => f
                .debug_struct("Sampled")
                .field("inner_samples", inner_samples)
                .field("seed", seed)
                .finish(),
        }
    }
}

/// The preprocessing map `T` together with the tightest upper bound `τ` of
/// the support of `z = T(y)`.
#[derive(Clone)]
pub struct Preprocessor {
    map: ScalarMap,
    tau: f64,
}

impl Preprocessor {
    pub fn new(map: ScalarMap, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "tau must be positive and finite, got {tau}"
            )));
        }
        Ok(Preprocessor { map, tau })
    }

    pub fn identity(tau: f64) -> Result<Self> {
        Self::new(Arc::new(|y| y), tau)
    }

    #[inline]
    pub fn apply(&self, y: f64) -> f64 {
        (self.map)(y)
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

impl fmt::Debug for Preprocessor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Preprocessor").field("tau", &self.tau).finish()
    }
}

/// A maximal interval `[lo, hi)` of `s` on which the conditional law of `z`
/// is constant. `atoms` lists `(z value, probability)` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub lo: f64,
    pub hi: f64,
    pub atoms: Vec<(f64, f64)>,
}

impl Cell {
    pub fn point(lo: f64, hi: f64, z: f64) -> Self {
        Cell { lo, hi, atoms: vec![(z, 1.0)] }
    }
}

/// How `s ↦ E[h(z) | s]` behaves, which decides the integration path.
#[derive(Clone, Debug, PartialEq)]
pub enum SignalLayout {
    /// Smooth in `s`: Gauss-Hermite quadrature is used.
    Smooth,
    /// Smooth between the listed breakpoints (ascending, in `s`):
    /// adaptive Gauss-Kronrod per segment.
    Piecewise(Vec<f64>),
    /// Piecewise-constant conditional law: exact Gaussian CDF arithmetic.
    Cells(Vec<Cell>),
}

/// Closed interval on the positive axis, serialized as `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    fn overlaps(&self, other: &Interval) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }
}

impl From<[f64; 2]> for Interval {
    fn from(v: [f64; 2]) -> Self {
        Interval { lo: v[0], hi: v[1] }
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.lo, i.hi]
    }
}

/// Joint law of `(s, y, z)` for a scalar acquisition model.
#[derive(Clone, Debug)]
pub struct ZSModel {
    name: String,
    kappa: f64,
    kernel: ConditionalKernel,
    preprocessor: Preprocessor,
    layout: SignalLayout,
    quadratic: bool,
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "{name} must be positive and finite, got {v}"
        )))
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Builds cells over the whole real line from pieces `(lo, hi, z)` given on
/// `|s|`, ascending and non-overlapping. Gaps are filled with `z = 0`.
fn symmetric_cells(pieces: &[(f64, f64, f64)]) -> Vec<Cell> {
    let mut right = Vec::new();
    let mut cursor = 0.0;
    for &(lo, hi, z) in pieces {
        if lo > cursor {
            right.push(Cell::point(cursor, lo, 0.0));
        }
        right.push(Cell::point(lo, hi, z));
        cursor = hi;
    }
    if cursor < f64::INFINITY {
        right.push(Cell::point(cursor, f64::INFINITY, 0.0));
    }
    let mut cells: Vec<Cell> = right
        .iter()
        .rev()
        .map(|c| Cell { lo: -c.hi, hi: -c.lo, atoms: c.atoms.clone() })
        .collect();
    cells.extend(right);
    cells
}

impl ZSModel {
    /// General constructor. Sampled kernels are only supported with a
    /// [`SignalLayout::Smooth`] layout.
    pub fn new(
        name: impl Into<String>,
        kappa: f64,
        kernel: ConditionalKernel,
        preprocessor: Preprocessor,
        layout: SignalLayout,
    ) -> Result<Self> {
        check_positive("kappa", kappa)?;
        match &kernel {
            ConditionalKernel::FiniteDiscrete { outcomes, .. } => {
                if outcomes.is_empty() || outcomes.len() > MAX_OUTCOMES {
                    return Err(Error::InvalidParameter(format!(
                        "finite kernel needs 1..={MAX_OUTCOMES} outcomes, got {}",
                        outcomes.len()
                    )));
                }
            }
            ConditionalKernel::Sampled { inner_samples, .. } => {
                if *inner_samples == 0 {
                    return Err(Error::InvalidParameter("inner_samples must be >= 1".into()));
                }
                if layout != SignalLayout::Smooth {
                    return Err(Error::InvalidParameter(
                        "sampled kernels require a smooth layout".into(),
                    ));
                }
            }
            ConditionalKernel::Deterministic(_) => {}
        }
        match &layout {
            SignalLayout::Piecewise(breaks) => {
                if breaks.windows(2).any(|w| !(w[0] < w[1])) || breaks.iter().any(|b| !b.is_finite())
                {
                    return Err(Error::InvalidParameter(
                        "breakpoints must be finite and strictly ascending".into(),
                    ));
                }
            }
            SignalLayout::Cells(cells) => validate_cells(cells, preprocessor.tau)?,
            SignalLayout::Smooth => {}
        }
        Ok(ZSModel {
            name: name.into(),
            kappa,
            kernel,
            preprocessor,
            layout,
            quadratic: false,
        })
    }

    /// Model defined directly by its piecewise-constant conditional law of
    /// `z` given `s` (κ = 1, `y = z`).
    pub fn from_cells(name: impl Into<String>, cells: Vec<Cell>, tau: f64) -> Result<Self> {
        validate_cells(&cells, tau)?;
        let mut outcomes: Vec<f64> = Vec::new();
        for c in &cells {
            for &(z, _) in &c.atoms {
                if !outcomes.contains(&z) {
                    outcomes.push(z);
                }
            }
        }
        outcomes.sort_by(f64::total_cmp);
        let table = cells.clone();
        let index = outcomes.clone();
        let probabilities: ProbabilityMap = Arc::new(move |x: f64, out: &mut [f64]| {
            out.iter_mut().for_each(|p| *p = 0.0);
            let cell = table
                .iter()
                .find(|c| c.lo <= x && x < c.hi)
                .unwrap_or_else(|| table.last().expect("cells are nonempty"));
            for &(z, p) in &cell.atoms {
                let k = index.iter().position(|&o| o == z).expect("outcome indexed");
                out[k] += p;
            }
        });
        Self::new(
            name,
            1.0,
            ConditionalKernel::FiniteDiscrete { outcomes, probabilities },
            Preprocessor::identity(tau)?,
            SignalLayout::Cells(cells),
        )
    }

    /// Logistic regression with binary outcomes: `P(y = 1 | s) = σ(κs − β)`,
    /// `z = y`, `τ = 1`.
    pub fn logistic(kappa: f64, beta: f64) -> Result<Self> {
        check_positive("kappa", kappa)?;
        if !beta.is_finite() {
            return Err(Error::InvalidParameter(format!("beta must be finite, got {beta}")));
        }
        let probabilities: ProbabilityMap = Arc::new(move |x: f64, out: &mut [f64]| {
            let p1 = sigmoid(x - beta);
            out[0] = 1.0 - p1;
            out[1] = p1;
        });
        Self::new(
            format!("logistic(kappa={kappa}, beta={beta})"),
            kappa,
            ConditionalKernel::FiniteDiscrete { outcomes: vec![0.0, 1.0], probabilities },
            Preprocessor::identity(1.0)?,
            SignalLayout::Smooth,
        )
    }

    /// Noiseless phase retrieval `y = (κs)²` with trimming
    /// `z = y·1[0 ≤ y ≤ t]`, `τ = t`.
    pub fn pr_trimming(kappa: f64, t: f64) -> Result<Self> {
        check_positive("kappa", kappa)?;
        check_positive("t", t)?;
        let edge = t.sqrt() / kappa;
        let mut model = Self::new(
            format!("pr_trimming(kappa={kappa}, t={t})"),
            kappa,
            ConditionalKernel::Deterministic(Arc::new(|x| x * x)),
            Preprocessor::new(Arc::new(move |y| if (0.0..=t).contains(&y) { y } else { 0.0 }), t)?,
            SignalLayout::Piecewise(vec![-edge, edge]),
        )?;
        model.quadratic = true;
        Ok(model)
    }

    /// Noiseless phase retrieval with the subset rule `z = 1[y > t]`, `τ = 1`.
    pub fn pr_subset(kappa: f64, t: f64) -> Result<Self> {
        check_positive("kappa", kappa)?;
        check_positive("t", t)?;
        let edge = t.sqrt() / kappa;
        let mut model = Self::new(
            format!("pr_subset(kappa={kappa}, t={t})"),
            kappa,
            ConditionalKernel::Deterministic(Arc::new(|x| x * x)),
            Preprocessor::new(Arc::new(move |y| if y > t { 1.0 } else { 0.0 }), 1.0)?,
            SignalLayout::Cells(symmetric_cells(&[(edge, f64::INFINITY, 1.0)])),
        )?;
        model.quadratic = true;
        Ok(model)
    }

    /// Three-level quantizer on `|s|` (κ = 1): `z = 1` on `i1`, `θ` on `i2`,
    /// `0` elsewhere.
    pub fn quantizer(theta: f64, i1: Interval, i2: Interval) -> Result<Self> {
        if !(theta > 0.0 && theta < 1.0) {
            return Err(Error::InvalidParameter(format!("theta must lie in (0, 1), got {theta}")));
        }
        for (label, i) in [("i1", &i1), ("i2", &i2)] {
            if !(i.lo >= 0.0 && i.lo < i.hi && i.hi.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{label} must be a finite interval on the positive axis, got [{}, {}]",
                    i.lo, i.hi
                )));
            }
        }
        if i1.overlaps(&i2) {
            return Err(Error::InvalidParameter("quantizer intervals overlap".into()));
        }
        let mut pieces = vec![(i1.lo, i1.hi, 1.0), (i2.lo, i2.hi, theta)];
        pieces.sort_by(|a, b| a.0.total_cmp(&b.0));
        let level = move |x: f64| {
            let a = x.abs();
            if i1.contains(a) {
                1.0
            } else if i2.contains(a) {
                theta
            } else {
                0.0
            }
        };
        Self::new(
            format!("quantizer(theta={theta}, i1=[{}, {}], i2=[{}, {}])", i1.lo, i1.hi, i2.lo, i2.hi),
            1.0,
            ConditionalKernel::Deterministic(Arc::new(level)),
            Preprocessor::identity(1.0)?,
            SignalLayout::Cells(symmetric_cells(&pieces)),
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn tau(&self) -> f64 {
        self.preprocessor.tau
    }

    pub fn kernel(&self) -> &ConditionalKernel {
        &self.kernel
    }

    pub fn preprocessor(&self) -> &Preprocessor {
        &self.preprocessor
    }

    pub fn layout(&self) -> &SignalLayout {
        &self.layout
    }

    /// True for noiseless phase retrieval, where `y = (κs)²` and the norm
    /// can be read off `mean(y)`.
    pub fn is_quadratic_measurement(&self) -> bool {
        self.quadratic
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self.kernel, ConditionalKernel::Deterministic(_))
    }

    /// Visits the atoms `(z, probability)` of the conditional law of `z`
    /// given `s`. Sampled kernels contribute `inner_samples` equally
    /// weighted draws and need `rng`.
    pub fn for_each_atom(
        &self,
        s: f64,
        rng: Option<&mut dyn RngCore>,
        mut visit: impl FnMut(f64, f64),
    ) -> Result<()> {
        let x = self.kappa * s;
        match &self.kernel {
            ConditionalKernel::Deterministic(f) => visit(self.preprocessor.apply(f(x)), 1.0),
            ConditionalKernel::FiniteDiscrete { outcomes, probabilities } => {
                let mut buf = [0.0; MAX_OUTCOMES];
                let probs = &mut buf[..outcomes.len()];
                probabilities(x, probs);
                for (&y, &p) in outcomes.iter().zip(probs.iter()) {
                    if p != 0.0 {
                        visit(self.preprocessor.apply(y), p);
                    }
                }
            }
            ConditionalKernel::Sampled { sampler, inner_samples, .. } => {
                let rng = rng.ok_or(Error::MissingRng)?;
                let w = 1.0 / *inner_samples as f64;
                for _ in 0..*inner_samples {
                    visit(self.preprocessor.apply(sampler(x, rng)), w);
                }
            }
        }
        Ok(())
    }

    /// `E[h(z) | s]`.
    pub fn cond_expect(
        &self,
        h: impl Fn(f64) -> f64,
        s: f64,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<f64> {
        let mut acc = 0.0;
        self.for_each_atom(s, rng, |z, p| acc += p * h(z))?;
        Ok(acc)
    }

    /// Draws `(y, z)` given `s`.
    pub fn sample_zy<R: Rng + ?Sized>(&self, s: f64, rng: &mut R) -> (f64, f64) {
        let x = self.kappa * s;
        let y = match &self.kernel {
            ConditionalKernel::Deterministic(f) => f(x),
            ConditionalKernel::FiniteDiscrete { outcomes, probabilities } => {
                let mut buf = [0.0; MAX_OUTCOMES];
                let probs = &mut buf[..outcomes.len()];
                probabilities(x, probs);
                let u: f64 = rng.gen();
                let mut cum = 0.0;
                let mut pick = outcomes[outcomes.len() - 1];
                for (&y, &p) in outcomes.iter().zip(probs.iter()) {
                    cum += p;
                    if u < cum {
                        pick = y;
                        break;
                    }
                }
                pick
            }
            ConditionalKernel::Sampled { sampler, .. } => {
                let mut adapter = DynRng(rng);
                sampler(x, &mut adapter)
            }
        };
        (y, self.preprocessor.apply(y))
    }
}

/// Bridges a possibly unsized generic RNG to `&mut dyn RngCore`.
struct DynRng<'a, R: Rng + ?Sized>(&'a mut R);

impl<R: Rng + ?Sized> RngCore for DynRng<'_, R> {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.0.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.0.try_fill_bytes(dest)
    }
}

fn validate_cells(cells: &[Cell], tau: f64) -> Result<()> {
    let bad = |msg: String| Err(Error::InvalidParameter(msg));
    if cells.is_empty() {
        return bad("cell list is empty".into());
    }
    if cells[0].lo != f64::NEG_INFINITY || cells[cells.len() - 1].hi != f64::INFINITY {
        return bad("cells must cover the whole real line".into());
    }
    for w in cells.windows(2) {
        if w[0].hi != w[1].lo {
            return bad(format!("cells are not contiguous at {}", w[0].hi));
        }
    }
    for c in cells {
        if !(c.lo < c.hi) {
            return bad(format!("empty cell [{}, {})", c.lo, c.hi));
        }
        let total: f64 = c.atoms.iter().map(|a| a.1).sum();
        if (total - 1.0).abs() > 1e-12 || c.atoms.iter().any(|a| a.1 < 0.0) {
            return bad(format!("cell [{}, {}) probabilities do not sum to 1", c.lo, c.hi));
        }
        if c.atoms.iter().any(|a| !(0.0..=tau).contains(&a.0)) {
            return bad(format!("cell [{}, {}) has z outside [0, {tau}]", c.lo, c.hi));
        }
    }
    Ok(())
}

/// Serializable description of a built-in model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelSpec {
    Logistic {
        kappa: f64,
        beta: f64,
    },
    PrTrimming {
        #[serde(default = "unit")]
        kappa: f64,
        t: f64,
    },
    PrSubset {
        #[serde(default = "unit")]
        kappa: f64,
        t: f64,
    },
    Quantizer {
        theta: f64,
        i1: Interval,
        i2: Interval,
    },
}

fn unit() -> f64 {
    1.0
}

impl ModelSpec {
    pub fn build(&self) -> Result<ZSModel> {
        match *self {
            ModelSpec::Logistic { kappa, beta } => ZSModel::logistic(kappa, beta),
            ModelSpec::PrTrimming { kappa, t } => ZSModel::pr_trimming(kappa, t),
            ModelSpec::PrSubset { kappa, t } => ZSModel::pr_subset(kappa, t),
            ModelSpec::Quantizer { theta, i1, i2 } => ZSModel::quantizer(theta, i1, i2),
        }
    }

    /// Threshold parameter, for models that have one.
    pub fn threshold(&self) -> Option<f64> {
        match *self {
            ModelSpec::PrTrimming { t, .. } | ModelSpec::PrSubset { t, .. } => Some(t),
            _ => None,
        }
    }

    pub fn with_threshold(&self, t: f64) -> Option<ModelSpec> {
        match *self {
            ModelSpec::PrTrimming { kappa, .. } => Some(ModelSpec::PrTrimming { kappa, t }),
            ModelSpec::PrSubset { kappa, .. } => Some(ModelSpec::PrSubset { kappa, t }),
            _ => None,
        }
    }
}

/// `(λ, E[z/(λ−z)²], E[zs²/(λ−z)])` sampled as `λ ↓ τ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergencePoint {
    pub lambda: f64,
    pub e_z_over_gap_sq: f64,
    pub e_zs2_over_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub bounded_ok: bool,
    pub pos_corr_ok: bool,
    /// `E[zs²] − E[z]`.
    pub pos_corr_margin: f64,
    pub divergence_trend: Vec<DivergencePoint>,
    /// Both tabulated expectations increase monotonically as `λ ↓ τ`.
    pub divergence_increasing: bool,
    pub notes: Vec<String>,
}

const BOUNDEDNESS_DRAWS: usize = 10_000;
const VALIDATION_SEED: u64 = 0x5eed_0f_a55;

/// Numeric evidence for the boundedness, divergence and positive
/// correlation conditions. Report only: nothing here is a proof.
pub fn validate(model: &ZSModel, rule: &QuadratureRule) -> Result<AssumptionReport> {
    use rand::SeedableRng;
    use rand_distr::StandardNormal;

    let tau = model.tau();
    let mut notes = Vec::new();

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(VALIDATION_SEED);
    let mut worst = None;
    for _ in 0..BOUNDEDNESS_DRAWS {
        let s: f64 = rng.sample(StandardNormal);
        let (_, z) = model.sample_zy(s, &mut rng);
        if !(0.0..=tau).contains(&z) {
            worst = Some(z);
            break;
        }
    }
    let bounded_ok = worst.is_none();
    if let Some(z) = worst {
        notes.push(format!("sampled z = {z} outside [0, {tau}]"));
    }

    let base = quadrature::base_moments(model, rule)?;
    let margin = base.c - base.d;
    let pos_corr_ok = margin > 0.0;
    if !pos_corr_ok {
        notes.push(format!(
            "E[zs^2] - E[z] = {margin:.6e} is not positive; the spectral estimate is uninformative"
        ));
    }

    let mut trend = Vec::new();
    for k in 2..=8 {
        let lambda = tau * (1.0 + 10f64.powi(-k));
        let m = quadrature::lambda_moments(model, rule, lambda)?;
        trend.push(DivergencePoint {
            lambda,
            e_z_over_gap_sq: m.m3,
            e_zs2_over_gap: m.m2,
        });
    }
    let divergence_increasing = trend.windows(2).all(|w| {
        w[1].e_z_over_gap_sq > w[0].e_z_over_gap_sq && w[1].e_zs2_over_gap > w[0].e_zs2_over_gap
    });
    if !divergence_increasing {
        notes.push("expectations near tau do not increase monotonically".into());
    }

    Ok(AssumptionReport {
        bounded_ok,
        pos_corr_ok,
        pos_corr_margin: margin,
        divergence_trend: trend,
        divergence_increasing,
        notes,
    })
}
