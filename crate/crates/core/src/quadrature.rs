//! Expectations over `s ~ N(0, 1)` composed with a model's conditional law.
//!
//! Three evaluation paths, chosen by the model's [`SignalLayout`]:
//!
//! * smooth models use a probabilists' Gauss-Hermite rule;
//! * piecewise-smooth models are integrated segment by segment with
//!   adaptive Gauss-Kronrod (7/15) against the Gaussian density;
//! * piecewise-constant models reduce to truncated Gaussian moments, which
//!   are evaluated in closed form from `erfc`. This is what resolves the
//!   narrow far-tail intervals of the quantizer model.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Cell, ConditionalKernel, SignalLayout, ZSModel};

pub const DEFAULT_ORDER: usize = 201;
pub const MAX_ORDER: usize = 1000;

/// Integration range used for unbounded segments; the Gaussian density is
/// below the smallest subnormal past this point.
const TAIL: f64 = 38.0;
const GK_REL_TOL: f64 = 1e-13;
const GK_ABS_TOL: f64 = 1e-18;
const GK_MAX_INTERVALS: usize = 1000;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Relative offset above `τ` below which λ-dependent expectations are
/// refused (the integrands have a pole at `λ = z = τ`).
pub const LAMBDA_GUARD: f64 = 1e-12;

/// Standard normal density.
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Upper tail `P(s > x)`, accurate deep into both tails.
#[inline]
pub fn normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    normal_sf(-x)
}

/// `P(lo < s < hi)` without cancellation when both ends sit in one tail.
pub fn normal_mass(lo: f64, hi: f64) -> f64 {
    if lo >= 0.0 {
        normal_sf(lo) - normal_sf(hi)
    } else if hi <= 0.0 {
        normal_sf(-hi) - normal_sf(-lo)
    } else {
        1.0 - normal_sf(hi) - normal_sf(-lo)
    }
}

/// `∫_lo^hi s^k φ(s) ds` for `k ≤ 2`.
pub fn truncated_moment(lo: f64, hi: f64, k: u32) -> f64 {
    // x·φ(x) → 0 at ±∞
    let sphi = |x: f64| if x.is_finite() { x * normal_pdf(x) } else { 0.0 };
    let pdf = |x: f64| if x.is_finite() { normal_pdf(x) } else { 0.0 };
    match k {
        0 => normal_mass(lo, hi),
        1 => pdf(lo) - pdf(hi),
        2 => normal_mass(lo, hi) + sphi(lo) - sphi(hi),
        _ => panic!("truncated moments are implemented up to order 2"),
    }
}

/// Probabilists' Gauss-Hermite rule: `Σ wᵢ f(xᵢ) ≈ E f(s)`, `s ~ N(0, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    order: usize,
}

impl QuadratureRule {
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// `Σ wᵢ f(xᵢ)`.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

impl Default for QuadratureRule {
    fn default() -> Self {
        gauss_hermite(DEFAULT_ORDER).expect("default order is in range")
    }
}

/// Orthonormal Hermite recurrence at `x`: returns `(p_n, p_{n-1}, ln scale)`
/// where the true values are the returned ones times `exp(ln scale)`.
fn hermite_pair(n: usize, x: f64, roots: &[f64]) -> (f64, f64, f64) {
    const BIG: f64 = 1e150;
    const LN_BIG: f64 = 345.387_763_949_107_0; // ln(1e150)
    let mut prev = 0.0;
    let mut cur = 1.0;
    let mut log_scale = 0.0;
    for k in 0..n {
        let next = (x * cur - roots[k] * prev) / roots[k + 1];
        prev = cur;
        cur = next;
        if cur.abs() > BIG {
            cur /= BIG;
            prev /= BIG;
            log_scale += LN_BIG;
        }
    }
    (cur, prev, log_scale)
}

/// Number of eigenvalues below `x` of the Jacobi matrix with zero diagonal
/// and off-diagonal `√k`, by Sturm sequence.
fn sturm_count(n: usize, x: f64) -> usize {
    let mut count = 0;
    let mut q = -x;
    if q < 0.0 {
        count += 1;
    }
    for k in 1..n {
        if q == 0.0 {
            q = f64::MIN_POSITIVE;
        }
        q = -x - k as f64 / q;
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

/// Golub-Welsch construction: nodes are eigenvalues of the symmetric
/// tridiagonal Jacobi matrix (Sturm bisection), polished by Newton on the
/// orthonormal recurrence; weights are Christoffel numbers
/// `1 / (n p_{n-1}(x)²)`, normalized to sum to one.
///
/// For large orders the outermost weights fall below the f64 range and are
/// stored as zero.
pub fn gauss_hermite(order: usize) -> Result<QuadratureRule> {
    if !(1..=MAX_ORDER).contains(&order) {
        return Err(Error::OrderOutOfRange(order));
    }
    let n = order;
    let roots: Vec<f64> = (0..=n).map(|k| (k as f64).sqrt()).collect();
    let bound = 2.0 * (n as f64).sqrt() + 1.0;

    let mut nodes = vec![0.0; n];
    let mut log_w = vec![0.0; n];
    for j in n / 2..n {
        let (mut lo, mut hi) = (if j == n / 2 { -1.0 } else { nodes[j - 1] }, bound);
        if n % 2 == 1 && j == n / 2 {
            nodes[j] = 0.0;
        } else {
            loop {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if sturm_count(n, mid) > j {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let mut x = 0.5 * (lo + hi);
            for _ in 0..3 {
                let (pn, pm, _) = hermite_pair(n, x, &roots);
                let step = pn / (roots[n] * pm);
                if !step.is_finite() {
                    break;
                }
                x -= step;
            }
            nodes[j] = x;
        }
        let (_, pm, scale) = hermite_pair(n, nodes[j], &roots);
        log_w[j] = -(n as f64).ln() - 2.0 * (pm.abs().ln() + scale);
    }
    for j in 0..n / 2 {
        nodes[j] = -nodes[n - 1 - j];
        log_w[j] = log_w[n - 1 - j];
    }

    let mut weights: Vec<f64> = log_w.iter().map(|l| l.exp()).collect();
    // Sum from the tails inwards so small weights are not absorbed.
    let mut order_idx: Vec<usize> = (0..n).collect();
    order_idx.sort_by(|&a, &b| weights[a].total_cmp(&weights[b]));
    let total: f64 = order_idx.iter().map(|&i| weights[i]).sum();
    weights.iter_mut().for_each(|w| *w /= total);

    Ok(QuadratureRule { nodes, weights, order })
}

// Gauss-Kronrod 7/15 abscissae and weights on [-1, 1].
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<const K: usize>(f: &impl Fn(f64) -> [f64; K], a: f64, b: f64) -> ([f64; K], [f64; K]) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut kron = [0.0; K];
    let mut gauss = [0.0; K];
    let fc = f(c);
    for j in 0..K {
        kron[j] = WGK[7] * fc[j];
        gauss[j] = WG[3] * fc[j];
    }
    for i in 0..7 {
        let dx = h * XGK[i];
        let f1 = f(c - dx);
        let f2 = f(c + dx);
        for j in 0..K {
            let pair = f1[j] + f2[j];
            kron[j] += WGK[i] * pair;
            if i % 2 == 1 {
                gauss[j] += WG[i / 2] * pair;
            }
        }
    }
    let mut err = [0.0; K];
    for j in 0..K {
        kron[j] *= h;
        err[j] = (kron[j] - gauss[j] * h).abs();
    }
    (kron, err)
}

/// Globally adaptive Gauss-Kronrod for a vector-valued integrand on a
/// finite interval: the subinterval with the largest scaled error is split
/// until every component meets `Σ err ≤ max(rel·|I|, abs)` or the interval
/// budget is spent (which happens when rounding noise in the integrand,
/// e.g. next to a pole, exceeds the tolerance).
pub fn integrate_adaptive<const K: usize>(f: impl Fn(f64) -> [f64; K], a: f64, b: f64) -> [f64; K] {
    integrate_adaptive_tol(f, a, b, GK_REL_TOL)
}

/// [`integrate_adaptive`] with an explicit relative tolerance.
pub fn integrate_adaptive_tol<const K: usize>(
    f: impl Fn(f64) -> [f64; K],
    a: f64,
    b: f64,
    rel_tol: f64,
) -> [f64; K] {
    if !(b > a) {
        return [0.0; K];
    }
    let (est, err) = gk15(&f, a, b);
    let mut sum = est;
    let mut err_sum = err;
    let tol_of = |sum: &[f64; K]| sum.map(|v| (rel_tol * v.abs()).max(GK_ABS_TOL));
    let score = |r: &[f64; K], tol: &[f64; K]| (0..K).map(|j| r[j] / tol[j]).fold(0.0, f64::max);

    let mut heap: BinaryHeap<Piece<K>> = BinaryHeap::new();
    heap.push(Piece { key: score(&err, &tol_of(&sum)).to_bits(), lo: a, hi: b, est, err });
    let mut done: Vec<Piece<K>> = Vec::new();
    while done.len() + heap.len() < GK_MAX_INTERVALS {
        let tol = tol_of(&sum);
        if (0..K).all(|j| err_sum[j] <= tol[j]) {
            break;
        }
        let Some(p) = heap.pop() else { break };
        let mid = 0.5 * (p.lo + p.hi);
        if !(mid > p.lo && mid < p.hi) {
            done.push(p);
            continue;
        }
        let left = gk15(&f, p.lo, mid);
        let right = gk15(&f, mid, p.hi);
        for j in 0..K {
            sum[j] += left.0[j] + right.0[j] - p.est[j];
            err_sum[j] += left.1[j] + right.1[j] - p.err[j];
        }
        for (lo, hi, (est, err)) in [(p.lo, mid, left), (mid, p.hi, right)] {
            heap.push(Piece { key: score(&err, &tol).to_bits(), lo, hi, est, err });
        }
    }
    // Final sum in ascending position order, independent of heap layout.
    done.extend(heap);
    done.sort_by(|x, y| x.lo.total_cmp(&y.lo));
    let mut total = [0.0; K];
    for p in &done {
        for j in 0..K {
            total[j] += p.est[j];
        }
    }
    total
}

struct Piece<const K: usize> {
    key: u64,
    lo: f64,
    hi: f64,
    est: [f64; K],
    err: [f64; K],
}

impl<const K: usize> PartialEq for Piece<K> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<const K: usize> Eq for Piece<K> {}
impl<const K: usize> PartialOrd for Piece<K> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<const K: usize> Ord for Piece<K> {
    // Scores are nonnegative, so their bit patterns order like the values;
    // ties go to the leftmost piece for reproducibility.
    fn cmp(&self, other: &Self) -> Ordering {
        self.key.cmp(&other.key).then_with(|| other.lo.total_cmp(&self.lo))
    }
}

fn clip(lo: f64, hi: f64) -> (f64, f64) {
    (lo.max(-TAIL), hi.min(TAIL))
}

fn node_rng(model: &ZSModel, node: usize) -> Option<ChaCha8Rng> {
    match model.kernel() {
        ConditionalKernel::Sampled { seed, .. } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            rng.set_stream(node as u64);
            Some(rng)
        }
        _ => None,
    }
}

/// `E[g(z, s)]` componentwise for a vector-valued `g`.
pub fn expect_array<const K: usize>(
    model: &ZSModel,
    rule: &QuadratureRule,
    g: impl Fn(f64, f64) -> [f64; K],
) -> Result<[f64; K]> {
    expect_array_tol(model, rule, g, GK_REL_TOL)
}

fn expect_array_tol<const K: usize>(
    model: &ZSModel,
    rule: &QuadratureRule,
    g: impl Fn(f64, f64) -> [f64; K],
    rel_tol: f64,
) -> Result<[f64; K]> {
    let conditional = |s: f64| -> [f64; K] {
        let mut acc = [0.0; K];
        model
            .for_each_atom(s, None, |z, p| {
                let v = g(z, s);
                for j in 0..K {
                    acc[j] += p * v[j];
                }
            })
            .expect("non-sampled kernels need no randomness");
        acc
    };
    match model.layout() {
        SignalLayout::Smooth => {
            let mut total = [0.0; K];
            for (i, (&x, &w)) in rule.nodes().iter().zip(rule.weights()).enumerate() {
                if w == 0.0 {
                    continue;
                }
                let mut rng = node_rng(model, i);
                let mut acc = [0.0; K];
                model.for_each_atom(
                    x,
                    rng.as_mut().map(|r| r as &mut dyn rand::RngCore),
                    |z, p| {
                        let v = g(z, x);
                        for j in 0..K {
                            acc[j] += p * v[j];
                        }
                    },
                )?;
                for j in 0..K {
                    total[j] += w * acc[j];
                }
            }
            Ok(total)
        }
        SignalLayout::Piecewise(breaks) => {
            let mut edges = Vec::with_capacity(breaks.len() + 2);
            edges.push(-TAIL);
            edges.extend(breaks.iter().copied().filter(|b| b.abs() < TAIL));
            edges.push(TAIL);
            let mut total = [0.0; K];
            for w in edges.windows(2) {
                let part = integrate_adaptive_tol(
                    |s| {
                        let c = conditional(s);
                        let d = normal_pdf(s);
                        c.map(|v| v * d)
                    },
                    w[0],
                    w[1],
                    rel_tol,
                );
                for j in 0..K {
                    total[j] += part[j];
                }
            }
            Ok(total)
        }
        SignalLayout::Cells(cells) => {
            let mut total = [0.0; K];
            for cell in cells {
                let (lo, hi) = clip(cell.lo, cell.hi);
                for &(z, p) in &cell.atoms {
                    let part = integrate_adaptive_tol(
                        |s| {
                            let d = normal_pdf(s);
                            g(z, s).map(|v| v * d)
                        },
                        lo,
                        hi,
                        rel_tol,
                    );
                    for j in 0..K {
                        total[j] += p * part[j];
                    }
                }
            }
            Ok(total)
        }
    }
}

/// `E[g(z, s)]`.
pub fn expect(model: &ZSModel, rule: &QuadratureRule, g: impl Fn(f64, f64) -> f64) -> Result<f64> {
    Ok(expect_array(model, rule, |z, s| [g(z, s)])?[0])
}

fn cell_terms<const K: usize>(
    cells: &[Cell],
    terms: &impl Fn(f64) -> [f64; K],
    powers: [u32; K],
) -> [f64; K] {
    let mut total = [0.0; K];
    for cell in cells {
        let t = [0, 1, 2].map(|k| truncated_moment(cell.lo, cell.hi, k));
        for &(z, p) in &cell.atoms {
            let h = terms(z);
            for j in 0..K {
                total[j] += p * h[j] * t[powers[j] as usize];
            }
        }
    }
    total
}

/// `E[hⱼ(z) s^pⱼ]` for `pⱼ ≤ 2`. Piecewise-constant models are evaluated
/// exactly through truncated Gaussian moments.
pub fn expect_terms<const K: usize>(
    model: &ZSModel,
    rule: &QuadratureRule,
    terms: impl Fn(f64) -> [f64; K],
    powers: [u32; K],
) -> Result<[f64; K]> {
    expect_terms_tol(model, rule, terms, powers, GK_REL_TOL)
}

/// [`expect_terms`] for integrands with a pole at `z = λ`. Evaluating
/// `λ − z` loses about `ε·τ/(λ−τ)` relative accuracy next to the pole, so
/// the adaptive tolerance is relaxed to that level.
pub fn expect_lambda_terms<const K: usize>(
    model: &ZSModel,
    rule: &QuadratureRule,
    lambda: f64,
    terms: impl Fn(f64) -> [f64; K],
    powers: [u32; K],
) -> Result<[f64; K]> {
    check_lambda(model, lambda)?;
    let tau = model.tau();
    let noise = 100.0 * f64::EPSILON * tau / (lambda - tau);
    expect_terms_tol(model, rule, terms, powers, GK_REL_TOL.max(noise))
}

fn expect_terms_tol<const K: usize>(
    model: &ZSModel,
    rule: &QuadratureRule,
    terms: impl Fn(f64) -> [f64; K],
    powers: [u32; K],
    rel_tol: f64,
) -> Result<[f64; K]> {
    assert!(powers.iter().all(|&p| p <= 2), "powers of s are limited to 2");
    match model.layout() {
        SignalLayout::Cells(cells) => Ok(cell_terms(cells, &terms, powers)),
        _ => expect_array_tol(model, rule, |z, s| {
            let h = terms(z);
            let mut out = [0.0; K];
            for j in 0..K {
                out[j] = match powers[j] {
                    0 => h[j],
                    1 => h[j] * s,
                    _ => h[j] * s * s,
                };
            }
            out
        }, rel_tol),
    }
}

/// Moments that do not depend on `λ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseMoments {
    /// `E[zs²]`
    pub c: f64,
    /// `E[z]`
    pub d: f64,
    /// `E[zs]`
    pub e_zs: f64,
    /// `E[z²]`
    pub e_z2: f64,
    pub tau: f64,
}

pub fn base_moments(model: &ZSModel, rule: &QuadratureRule) -> Result<BaseMoments> {
    let [c, d, e_zs, e_z2] = expect_terms(model, rule, |z| [z, z, z, z * z], [2, 0, 1, 0])?;
    Ok(BaseMoments { c, d, e_zs, e_z2, tau: model.tau() })
}

/// The six `λ`-dependent expectations behind every analytic formula.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaMoments {
    pub lambda: f64,
    /// `E[z/(λ−z)]`
    pub m1: f64,
    /// `E[zs²/(λ−z)]`
    pub m2: f64,
    /// `E[z/(λ−z)²]`
    pub m3: f64,
    /// `E[z²/(λ−z)²]`
    pub m4: f64,
    /// `E[z²s²/(λ−z)²]`
    pub m5: f64,
    /// `E[z²s²/(λ−z)]`
    pub m6: f64,
}

pub(crate) fn check_lambda(model: &ZSModel, lambda: f64) -> Result<()> {
    let tau = model.tau();
    if lambda > tau * (1.0 + LAMBDA_GUARD) && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain { lambda, tau })
    }
}

pub fn lambda_moments(model: &ZSModel, rule: &QuadratureRule, lambda: f64) -> Result<LambdaMoments> {
    let [m1, m2, m3, m4, m5, m6] = expect_lambda_terms(
        model,
        rule,
        lambda,
        |z| {
            let r = 1.0 / (lambda - z);
            let a = z * r;
            [a, a, a * r, a * a, a * a, z * a]
        },
        [0, 2, 0, 0, 2, 2],
    )?;
    Ok(LambdaMoments { lambda, m1, m2, m3, m4, m5, m6 })
}
