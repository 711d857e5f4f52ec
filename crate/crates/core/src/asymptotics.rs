//! Limits of the spectral estimator as `m, n → ∞` with `m/n → α`.
//!
//! Every quantity is a scalar function of a handful of expectations of the
//! pair `(z, s)`; see [`LambdaMoments`]. The two building blocks are
//!
//! * `ψ(λ) = λ E[zs²/(λ−z)]`, strictly decreasing on `(τ, ∞)`;
//! * `φ_α(λ) = λ (1/α + E[z/(λ−z)])`, convex with minimizer `λ̄_α`;
//!
//! and the fixed point `λ*` of `ζ_α = ψ`, where `ζ_α(λ) = φ_α(max(λ, λ̄_α))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ZSModel;
use crate::quadrature::{
    base_moments, check_lambda, expect_lambda_terms, lambda_moments, LambdaMoments, QuadratureRule,
};

/// `|φ'_α(λ*)|` below this is reported as [`Phase::Critical`].
pub const CRITICAL_TOL: f64 = 1e-9;
/// Number of log-spaced points used to scan `Δ` for sign changes.
pub const ZERO_SCAN_POINTS: usize = 100_000;
/// Absolute tolerance on refined zero crossings.
pub const ZERO_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Uncorrelated,
    Correlated,
    Critical,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Phase::Uncorrelated => "uncorrelated",
            Phase::Correlated => "correlated",
            Phase::Critical => "critical",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticPrediction {
    pub alpha: f64,
    pub lambda_star: f64,
    pub rho_limit: f64,
    pub lambda1_limit: f64,
    pub lambda2_limit: f64,
    pub phase: Phase,
    pub phi_prime_at_star: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub zeros: Vec<f64>,
    pub alpha_c: Vec<f64>,
    pub alpha_c_min: f64,
    pub alpha_c_max: f64,
    pub search_bound: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParametricPoint {
    pub lambda: f64,
    pub alpha: f64,
    pub rho: f64,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("alpha must be positive and finite, got {alpha}")))
    }
}

/// Bisection for an increasing function with `f(lo) < 0 < f(hi)`, run until
/// the bracket cannot be split further in floating point.
fn bisect(mut lo: f64, mut hi: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let v = f(mid)?;
        if v == 0.0 {
            return Ok(mid);
        }
        if v < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Walks `λ = τ(1 + ε)` towards `τ` (ε = 1e−6, 1e−7, …, 1e−11) until
/// `done(λ)`.
fn lower_bracket(model: &ZSModel, mut done: impl FnMut(f64) -> Result<bool>) -> Result<f64> {
    let tau = model.tau();
    for k in 6..=11 {
        let lambda = tau * (1.0 + 10f64.powi(-k));
        if done(lambda)? {
            return Ok(lambda);
        }
    }
    Err(Error::Bracketing(format!(
        "no sign change found down to lambda = tau(1 + 1e-11) for {}",
        model.name()
    )))
}

/// Doubles `λ` from `start` until `done(λ)`.
fn upper_bracket(start: f64, mut done: impl FnMut(f64) -> Result<bool>) -> Result<f64> {
    let mut lambda = start;
    for _ in 0..1100 {
        if done(lambda)? {
            return Ok(lambda);
        }
        lambda *= 2.0;
    }
    Err(Error::Bracketing(format!("no upper bracket found above {start}")))
}

/// `ψ(λ) = λ E[zs²/(λ−z)]`.
pub fn psi(model: &ZSModel, rule: &QuadratureRule, lambda: f64) -> Result<f64> {
    Ok(lambda * lambda_moments(model, rule, lambda)?.m2)
}

/// `φ_α(λ) = λ (1/α + E[z/(λ−z)])`.
pub fn phi(model: &ZSModel, rule: &QuadratureRule, alpha: f64, lambda: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(phi_from(&lambda_moments(model, rule, lambda)?, alpha))
}

fn phi_from(lm: &LambdaMoments, alpha: f64) -> f64 {
    lm.lambda * (1.0 / alpha + lm.m1)
}

/// `φ'_α(λ) = 1/α − E[z²/(λ−z)²]`.
pub fn phi_prime(model: &ZSModel, rule: &QuadratureRule, alpha: f64, lambda: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(1.0 / alpha - lambda_moments(model, rule, lambda)?.m4)
}

/// `ψ'(λ) = −E[z²s²/(λ−z)²]`.
pub fn psi_prime(model: &ZSModel, rule: &QuadratureRule, lambda: f64) -> Result<f64> {
    Ok(-lambda_moments(model, rule, lambda)?.m5)
}

fn m4(model: &ZSModel, rule: &QuadratureRule, lambda: f64) -> Result<f64> {
    let [v] = expect_lambda_terms(model, rule, lambda, |z| [(z / (lambda - z)).powi(2)], [0])?;
    Ok(v)
}

/// The minimizer `λ̄_α` of `φ_α`: the root of `E[z²/(λ−z)²] = 1/α`.
pub fn lambda_bar(model: &ZSModel, rule: &QuadratureRule, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let target = 1.0 / alpha;
    let lo = lower_bracket(model, |l| Ok(m4(model, rule, l)? > target))?;
    let hi = upper_bracket(2.0 * lo, |l| Ok(m4(model, rule, l)? < target))?;
    bisect(lo, hi, |l| Ok(target - m4(model, rule, l)?))
}

/// `ζ_α(λ) = φ_α(max(λ, λ̄_α))`.
pub fn zeta(model: &ZSModel, rule: &QuadratureRule, alpha: f64, lambda: f64) -> Result<f64> {
    check_lambda(model, lambda)?;
    let bar = lambda_bar(model, rule, alpha)?;
    phi(model, rule, alpha, lambda.max(bar))
}

struct FixedPoint {
    bar: f64,
    phi_at_bar: f64,
    star: f64,
}

fn fixed_point(model: &ZSModel, rule: &QuadratureRule, alpha: f64) -> Result<FixedPoint> {
    let bar = lambda_bar(model, rule, alpha)?;
    let phi_at_bar = phi(model, rule, alpha, bar)?;
    let gap = |l: f64| -> Result<f64> {
        let lm = lambda_moments(model, rule, l)?;
        let zeta = if l > bar { phi_from(&lm, alpha) } else { phi_at_bar };
        Ok(zeta - l * lm.m2)
    };
    let lo = lower_bracket(model, |l| Ok(gap(l)? < 0.0))?;
    let hi = upper_bracket(bar.max(lo), |l| Ok(gap(l)? > 0.0))?;
    let star = bisect(lo, hi, gap)?;
    Ok(FixedPoint { bar, phi_at_bar, star })
}

/// The unique `λ* > τ` with `ζ_α(λ*) = ψ(λ*)`.
pub fn solve_lambda_star(model: &ZSModel, rule: &QuadratureRule, alpha: f64) -> Result<f64> {
    Ok(fixed_point(model, rule, alpha)?.star)
}

fn classify(alpha: f64, lambda_star: f64, phi_prime: f64, m5: f64, lam1: f64, lam2: f64) -> AsymptoticPrediction {
    let (phase, rho, lam1) = if phi_prime.abs() < CRITICAL_TOL {
        (Phase::Critical, 0.0, lam2)
    } else if phi_prime < 0.0 {
        (Phase::Uncorrelated, 0.0, lam2)
    } else {
        (Phase::Correlated, phi_prime / (phi_prime + m5), lam1)
    };
    AsymptoticPrediction {
        alpha,
        lambda_star,
        rho_limit: rho,
        lambda1_limit: lam1,
        lambda2_limit: lam2,
        phase,
        phi_prime_at_star: phi_prime,
    }
}

/// Limiting squared cosine similarity and top-two eigenvalues at ratio `α`.
pub fn predict(model: &ZSModel, rule: &QuadratureRule, alpha: f64) -> Result<AsymptoticPrediction> {
    let fp = fixed_point(model, rule, alpha)?;
    let lm = lambda_moments(model, rule, fp.star)?;
    let phi_prime = 1.0 / alpha - lm.m4;
    let lam1 = if fp.star > fp.bar { phi_from(&lm, alpha) } else { fp.phi_at_bar };
    Ok(classify(alpha, fp.star, phi_prime, lm.m5, lam1, fp.phi_at_bar))
}

fn delta_terms(model: &ZSModel, rule: &QuadratureRule, lambda: f64) -> Result<f64> {
    let [m3, m2] = expect_lambda_terms(
        model,
        rule,
        lambda,
        |z| {
            let r = 1.0 / (lambda - z);
            [z * r * r, z * r]
        },
        [0, 2],
    )?;
    Ok(lambda * m3 - m2)
}

/// `Δ(λ) = λ E[z/(λ−z)²] − E[zs²/(λ−z)]`, whose sign changes locate the
/// phase transitions.
pub fn delta(model: &ZSModel, rule: &QuadratureRule, lambda: f64) -> Result<f64> {
    check_lambda(model, lambda)?;
    delta_terms(model, rule, lambda)
}

/// Upper bound `τ / (1 − √(E z / E zs²))` on every zero of `Δ`.
pub fn zero_search_bound(model: &ZSModel, rule: &QuadratureRule) -> Result<f64> {
    let b = base_moments(model, rule)?;
    if !(b.c > b.d && b.d > 0.0) {
        return Err(Error::AssumptionViolated(format!(
            "need E[zs^2] > E[z] > 0, got E[zs^2] = {}, E[z] = {}",
            b.c, b.d
        )));
    }
    Ok(b.tau / (1.0 - (b.d / b.c).sqrt()))
}

/// All sign changes of `Δ` on `(τ, bound]`, ascending. Tangential zeros
/// (no sign change) are not detected.
pub fn zero_crossings(model: &ZSModel, rule: &QuadratureRule) -> Result<Vec<f64>> {
    let bound = zero_search_bound(model, rule)?;
    let tau = model.tau();
    let lo_off = tau * 1e-8;
    let hi_off = bound * 1.01 - tau;
    let ratio = (hi_off / lo_off).ln();
    let last = (ZERO_SCAN_POINTS - 1) as f64;
    let grid = |i: usize| {
        if i == ZERO_SCAN_POINTS - 1 {
            tau + hi_off
        } else {
            tau + lo_off * (ratio * i as f64 / last).exp()
        }
    };

    let mut zeros: Vec<f64> = Vec::new();
    let mut prev_l = grid(0);
    let mut prev_v = delta_terms(model, rule, prev_l)?;
    for i in 1..ZERO_SCAN_POINTS {
        let l = grid(i);
        let v = delta_terms(model, rule, l)?;
        if v == 0.0 {
            zeros.push(l);
        } else if prev_v != 0.0 && (v < 0.0) != (prev_v < 0.0) {
            let sign = if prev_v > 0.0 { -1.0 } else { 1.0 };
            let (mut a, mut b) = (prev_l, l);
            while b - a > ZERO_TOL {
                let mid = 0.5 * (a + b);
                if mid <= a || mid >= b {
                    break;
                }
                if sign * delta_terms(model, rule, mid)? < 0.0 {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            zeros.push(0.5 * (a + b));
        }
        prev_l = l;
        prev_v = v;
    }
    zeros.dedup_by(|a, b| (*a - *b).abs() <= ZERO_TOL);
    if zeros.is_empty() {
        return Err(Error::NoZeroCrossing { lo: tau + lo_off, hi: tau + hi_off });
    }
    Ok(zeros)
}

/// Zero crossings of `Δ` mapped to critical sampling ratios through
/// `1/α = E[z²/(λ−z)²]`.
pub fn critical_ratios(model: &ZSModel, rule: &QuadratureRule) -> Result<PhaseReport> {
    let search_bound = zero_search_bound(model, rule)?;
    let zeros = zero_crossings(model, rule)?;
    let alpha_c = zeros
        .iter()
        .map(|&l| Ok(1.0 / m4(model, rule, l)?))
        .collect::<Result<Vec<f64>>>()?;
    let alpha_c_min = alpha_c.iter().copied().fold(f64::INFINITY, f64::min);
    let alpha_c_max = alpha_c.iter().copied().fold(0.0, f64::max);
    Ok(PhaseReport { zeros, alpha_c, alpha_c_min, alpha_c_max, search_bound })
}

/// One point of the curve `λ ↦ (α, ρ)` valid above the largest zero of `Δ`;
/// no domain check beyond `λ > τ`.
pub fn parametric_point(model: &ZSModel, rule: &QuadratureRule, lambda: f64) -> Result<ParametricPoint> {
    let lm = lambda_moments(model, rule, lambda)?;
    let inv_alpha = lm.m2 - lm.m1;
    let rho = 1.0 / (1.0 + lm.m5 / (inv_alpha - lm.m4));
    Ok(ParametricPoint { lambda, alpha: 1.0 / inv_alpha, rho })
}

/// Evaluates [`parametric_point`] on a grid, rejecting points at or below
/// the largest zero crossing.
pub fn parametric_curve(
    model: &ZSModel,
    rule: &QuadratureRule,
    lambda_grid: &[f64],
) -> Result<Vec<ParametricPoint>> {
    let lc_max = zero_crossings(model, rule)?.last().copied().unwrap_or(model.tau());
    lambda_grid
        .iter()
        .map(|&l| {
            if l <= lc_max {
                Err(Error::InvalidParameter(format!(
                    "parametric grid point {l} is not above the largest critical lambda {lc_max}"
                )))
            } else {
                parametric_point(model, rule, l)
            }
        })
        .collect()
}

/// `ρ(α)` read off the parametric curve: `0` up to `α_c,max`, otherwise the
/// curve point whose `α` matches, located by bisection in `λ`.
pub fn parametric_rho(model: &ZSModel, rule: &QuadratureRule, report: &PhaseReport, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if alpha <= report.alpha_c_max {
        return Ok(0.0);
    }
    let lc = *report.zeros.last().expect("phase report has zeros");
    let inv = |l: f64| -> Result<f64> {
        let lm = lambda_moments(model, rule, l)?;
        Ok(lm.m2 - lm.m1)
    };
    let target = 1.0 / alpha;
    let hi = upper_bracket(2.0 * lc, |l| Ok(inv(l)? < target))?;
    let lambda = bisect(lc, hi, |l| Ok(target - inv(l)?))?;
    Ok(parametric_point(model, rule, lambda)?.rho)
}

/// `α_c = d/(c−d)²` for models with `z ∈ {0, 1}`.
pub fn one_bit_alpha_c(c: f64, d: f64) -> Result<f64> {
    if !(c > d && d > 0.0) {
        return Err(Error::AssumptionViolated(format!("one-bit formulas need c > d > 0, got c = {c}, d = {d}")));
    }
    Ok(d / (c - d).powi(2))
}

/// Closed-form limits for models with `z ∈ {0, 1}`, which depend on the
/// model only through `c = E zs²` and `d = E z`.
pub fn one_bit_predict(c: f64, d: f64, alpha: f64) -> Result<AsymptoticPrediction> {
    check_alpha(alpha)?;
    let alpha_c = one_bit_alpha_c(c, d)?;
    let edge = (d.sqrt() + 1.0 / alpha.sqrt()).powi(2);
    let gap = c - d;
    let lambda_star = if alpha > alpha_c {
        1.0 + alpha * gap
    } else {
        edge / (edge - c)
    };
    let phi_prime = if alpha > alpha_c {
        (alpha - alpha_c) / (alpha * alpha)
    } else {
        1.0 / alpha - d / (lambda_star - 1.0).powi(2)
    };
    let m5 = c / (lambda_star - 1.0).powi(2);
    let lam1 = c + c / (alpha * gap);
    let mut p = classify(alpha, lambda_star, phi_prime, m5, lam1, edge);
    if p.phase == Phase::Correlated {
        p.rho_limit = (alpha - alpha_c) / (alpha + 1.0 / gap);
    }
    Ok(p)
}

/// `Q(λ) = E[z²s²/(λ−z)]`, strictly decreasing on `(τ, ∞)`.
pub fn q_func(model: &ZSModel, rule: &QuadratureRule, lambda: f64) -> Result<f64> {
    let [v] = expect_lambda_terms(model, rule, lambda, |z| [z * z / (lambda - z)], [2])?;
    Ok(v)
}

/// The `λ > τ` with `Q(λ) = x`.
pub fn q_func_inverse(model: &ZSModel, rule: &QuadratureRule, x: f64) -> Result<f64> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::InvalidParameter(format!("Q inverse needs a positive argument, got {x}")));
    }
    let lo = lower_bracket(model, |l| Ok(q_func(model, rule, l)? > x))?;
    let hi = upper_bracket(2.0 * lo, |l| Ok(q_func(model, rule, l)? < x))?;
    bisect(lo, hi, |l| Ok(x - q_func(model, rule, l)?))
}

/// Limit of the squared cosine similarity of the linear estimator
/// `(1/m) Σ zᵢ aᵢ`: `(E zs)² / ((E zs)² + E z²/α)`.
pub fn linear_rho_limit(model: &ZSModel, rule: &QuadratureRule, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let b = base_moments(model, rule)?;
    let num = b.e_zs * b.e_zs;
    let den = num + b.e_z2 / alpha;
    Ok(if den > 0.0 { num / den } else { 0.0 })
}
