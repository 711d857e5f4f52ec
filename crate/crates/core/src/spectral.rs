//! Finite-dimensional machinery: the data matrix `D = (1/m) Σ zᵢ aᵢaᵢᵀ`,
//! its leading eigenpairs, the arrowhead reduction that characterizes the
//! top eigenpair through a scalar fixed point, diagonal-plus-rank-one
//! spectra, and the simple norm and linear estimators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default relative residual for [`top_two_eigenpairs`].
pub const DEFAULT_EIG_TOL: f64 = 1e-10;
/// Default cap on Lanczos steps.
pub const DEFAULT_MAX_ITER: usize = 2000;
const RESTART_SEED: u64 = 0x5eed_1a2c;

/// Sensing vectors (rows of `a`), measurements and target signal.
#[derive(Clone, Debug)]
pub struct SensingBatch {
    pub a: DMatrix<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub xi: DVector<f64>,
}

impl SensingBatch {
    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    pub fn n(&self) -> usize {
        self.a.ncols()
    }

    fn check(&self) -> Result<()> {
        let (m, n) = self.a.shape();
        if m == 0 || n == 0 {
            return Err(Error::DimensionMismatch(format!("empty sensing matrix {m}x{n}")));
        }
        if self.z.len() != m || self.y.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "{m} sensing vectors but {} measurements and {} weights",
                self.y.len(),
                self.z.len()
            )));
        }
        if self.xi.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "signal has length {} but sensing vectors have length {n}",
                self.xi.len()
            )));
        }
        Ok(())
    }
}

/// `D = (1/m) Σ zᵢ aᵢaᵢᵀ`, computed as `BᵀB/m` with `B = diag(√z) A`.
pub fn build_data_matrix(batch: &SensingBatch) -> Result<DMatrix<f64>> {
    batch.check()?;
    if batch.z.iter().any(|&z| !(z >= 0.0)) {
        return Err(Error::InvalidParameter("weights z must be nonnegative".into()));
    }
    let m = batch.m();
    let mut b = batch.a.clone();
    for (i, &z) in batch.z.iter().enumerate() {
        let w = z.sqrt();
        b.row_mut(i).scale_mut(w);
    }
    let mut d = b.tr_mul(&b);
    d /= m as f64;
    symmetrize(&mut d);
    Ok(d)
}

/// Replaces `d` by `(d + dᵀ)/2`.
pub fn symmetrize(d: &mut DMatrix<f64>) {
    let n = d.nrows();
    for j in 0..n {
        for i in j + 1..n {
            let v = 0.5 * (d[(i, j)] + d[(j, i)]);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenResult {
    pub lambda1: f64,
    pub lambda2: f64,
    pub x1: Vec<f64>,
    pub iterations: usize,
    /// `max(‖Dx₁ − λ₁x₁‖, ‖Dx₂ − λ₂x₂‖) / λ₁`.
    pub residual: f64,
}

/// Top two eigenvalues and the leading eigenvector of a symmetric PSD
/// matrix, by Lanczos with full reorthogonalization started from the
/// normalized all-ones vector. If the Krylov space becomes invariant, the
/// iteration continues from a seeded random vector orthogonal to it, so the
/// result is deterministic.
pub fn top_two_eigenpairs(d: &DMatrix<f64>, tol: f64) -> Result<EigenResult> {
    top_two_eigenpairs_with(d, tol, DEFAULT_MAX_ITER)
}

pub fn top_two_eigenpairs_with(d: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<EigenResult> {
    let n = d.nrows();
    if n == 0 || d.ncols() != n {
        return Err(Error::DimensionMismatch(format!("matrix is {}x{}, not square", d.nrows(), d.ncols())));
    }
    if n == 1 {
        let v = d[(0, 0)];
        if v < 0.0 {
            return Err(Error::NotPsd(v));
        }
        return Ok(EigenResult { lambda1: v, lambda2: 0.0, x1: vec![1.0], iterations: 1, residual: 0.0 });
    }
    let steps = max_iter.min(n).max(2);
    let scale = d.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let mut rng = ChaCha8Rng::seed_from_u64(RESTART_SEED);

    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(steps);
    let mut alphas: Vec<f64> = Vec::with_capacity(steps);
    let mut betas: Vec<f64> = Vec::with_capacity(steps);
    let mut q = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut next_check = 8usize;
    let mut last: Option<(EigenResult, DMatrix<f64>)> = None;

    for k in 0..steps {
        let mut w = d * &q;
        let a = q.dot(&w);
        w.axpy(-a, &q, 1.0);
        if let Some(prev) = basis.last() {
            w.axpy(-betas[k - 1], prev, 1.0);
        }
        basis.push(q.clone());
        alphas.push(a);
        // Full reorthogonalization, twice.
        for _ in 0..2 {
            for v in &basis {
                let c = v.dot(&w);
                w.axpy(-c, v, 1.0);
            }
        }
        let mut beta = w.norm();
        if k + 1 < steps && beta <= 1e-13 * scale.max(f64::MIN_POSITIVE) {
            // Invariant subspace: continue with a fresh orthogonal direction.
            beta = 0.0;
            w = fresh_direction(n, &basis, &mut rng);
        }
        betas.push(beta);
        let size = k + 1;
        if size >= next_check || size == steps {
            let (result, y) = ritz_top_two(d, &basis, &alphas, &betas, scale);
            if result.lambda2 < -1e-10 * scale.max(1.0) {
                return Err(Error::NotPsd(result.lambda2));
            }
            let done = result.residual <= tol || size == steps && size == n;
            last = Some((result, y));
            if done {
                break;
            }
            next_check = (size * 5 / 4).max(size + 4);
        }
        if k + 1 < steps {
            let norm = w.norm();
            if norm == 0.0 {
                break;
            }
            q = w / norm;
        }
    }
    let (result, _) = last.expect("at least one Ritz extraction is performed");
    if result.residual <= tol || basis.len() == n {
        Ok(result)
    } else {
        Err(Error::NotConverged(Box::new(result)))
    }
}

fn fresh_direction(n: usize, basis: &[DVector<f64>], rng: &mut ChaCha8Rng) -> DVector<f64> {
    if basis.len() >= n {
        return DVector::zeros(n);
    }
    loop {
        let mut w = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
        for _ in 0..2 {
            for v in basis {
                let c = v.dot(&w);
                w.axpy(-c, v, 1.0);
            }
        }
        let norm = w.norm();
        if norm > 1e-8 {
            return w / norm;
        }
    }
}

/// Ritz values/vectors of the Lanczos tridiagonal; residuals come from the
/// bottom entries of the Ritz vectors (`|β_k y_k|`).
fn ritz_top_two(
    d: &DMatrix<f64>,
    basis: &[DVector<f64>],
    alphas: &[f64],
    betas: &[f64],
    scale: f64,
) -> (EigenResult, DMatrix<f64>) {
    let k = alphas.len();
    let mut t = DMatrix::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alphas[i];
        if i + 1 < k {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let i1 = order[0];
    let lambda1 = eig.eigenvalues[i1];
    let lambda2 = if k > 1 { eig.eigenvalues[order[1]] } else { 0.0 };
    let tail = betas[k - 1];
    let res1 = (tail * eig.eigenvectors[(k - 1, i1)]).abs();
    let res2 = if k > 1 { (tail * eig.eigenvectors[(k - 1, order[1])]).abs() } else { 0.0 };
    let n = d.nrows();
    let mut x = DVector::zeros(n);
    for (j, v) in basis.iter().enumerate() {
        x.axpy(eig.eigenvectors[(j, i1)], v, 1.0);
    }
    let norm = x.norm();
    if norm > 0.0 {
        x /= norm;
    }
    let denom = lambda1.abs().max(scale * f64::EPSILON).max(f64::MIN_POSITIVE);
    let residual = res1.max(res2) / denom;
    (
        EigenResult { lambda1, lambda2, x1: x.as_slice().to_vec(), iterations: k, residual },
        eig.eigenvectors,
    )
}

/// `(uᵀv)² / (‖u‖²‖v‖²)`.
pub fn cosine_sq(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch(format!("lengths {} and {}", u.len(), v.len())));
    }
    let uu: f64 = u.iter().map(|x| x * x).sum();
    let vv: f64 = v.iter().map(|x| x * x).sum();
    if uu == 0.0 || vv == 0.0 {
        return Err(Error::ZeroVector);
    }
    let uv: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((uv * uv / (uu * vv)).clamp(0.0, 1.0))
}

/// The data matrix written in a frame whose first axis is the signal
/// direction, `[[a, qᵀ], [q, P]]`, with `q` expressed in the eigenbasis of
/// `P`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrowheadView {
    pub a_scalar: f64,
    /// Eigenvalues of `P`, ascending.
    pub p_eigvals: Vec<f64>,
    /// `wᵢᵀq` for the eigenvectors `wᵢ` of `P`.
    pub q_coords: Vec<f64>,
}

/// Squared cosine between the leading eigenvector and the first axis.
/// A single point unless the top eigenvalue is tied with an eigenvalue of
/// `P` that the border does not reach.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosSqInterval {
    pub lo: f64,
    pub hi: f64,
}

impl CosSqInterval {
    pub fn point(v: f64) -> Self {
        CosSqInterval { lo: v, hi: v }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    /// Midpoint, only when the interval is narrower than `1e-9`.
    pub fn value(&self) -> Option<f64> {
        (self.width() < 1e-9).then(|| 0.5 * (self.lo + self.hi))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrowheadSolution {
    pub mu_star: f64,
    pub lambda1: f64,
    pub cos_sq: CosSqInterval,
}

impl ArrowheadView {
    pub fn new(a_scalar: f64, p_eigvals: Vec<f64>, q_coords: Vec<f64>) -> Result<Self> {
        if p_eigvals.len() != q_coords.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} eigenvalues but {} coordinates",
                p_eigvals.len(),
                q_coords.len()
            )));
        }
        if q_coords.iter().all(|&q| q == 0.0) {
            return Err(Error::ZeroVector);
        }
        let mut pairs: Vec<(f64, f64)> = p_eigvals.into_iter().zip(q_coords).collect();
        pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
        let (p, q) = pairs.into_iter().unzip();
        Ok(ArrowheadView { a_scalar, p_eigvals: p, q_coords: q })
    }

    /// Rotates `d` so that `direction` becomes the first axis (Householder
    /// reflection) and diagonalizes the trailing block.
    pub fn from_matrix(d: &DMatrix<f64>, direction: &[f64]) -> Result<Self> {
        let n = d.nrows();
        if d.ncols() != n || direction.len() != n || n < 2 {
            return Err(Error::DimensionMismatch(format!(
                "matrix {}x{} with direction of length {}",
                d.nrows(),
                d.ncols(),
                direction.len()
            )));
        }
        let h = householder_to_first_axis(direction)?;
        let mut rotated = &h * d * &h;
        symmetrize(&mut rotated);
        let a = rotated[(0, 0)];
        let q = rotated.view((1, 0), (n - 1, 1)).into_owned();
        let p = rotated.view((1, 1), (n - 1, n - 1)).into_owned();
        let eig = SymmetricEigen::new(p);
        let coords = eig.eigenvectors.tr_mul(&q);
        Self::new(a, eig.eigenvalues.as_slice().to_vec(), coords.as_slice().to_vec())
    }

    /// Largest eigenvalue of `P`.
    pub fn p_top(&self) -> f64 {
        *self.p_eigvals.last().expect("view is nonempty")
    }

    /// Largest pole of `R`, i.e. the largest eigenvalue of `P` with a
    /// nonzero border coordinate.
    pub fn max_pole(&self) -> f64 {
        self.p_eigvals
            .iter()
            .zip(&self.q_coords)
            .filter(|(_, q)| **q != 0.0)
            .map(|(p, _)| *p)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn q_norm_sq(&self) -> f64 {
        self.q_coords.iter().map(|q| q * q).sum()
    }

    /// `R'(λ) = Σ qᵢ²/(pᵢ − λ)²`.
    pub fn r_prime(&self, lambda: f64) -> f64 {
        self.p_eigvals
            .iter()
            .zip(&self.q_coords)
            .filter(|(_, q)| **q != 0.0)
            .map(|(p, q)| (q / (p - lambda)).powi(2))
            .sum()
    }
}

fn householder_to_first_axis(direction: &[f64]) -> Result<DMatrix<f64>> {
    let n = direction.len();
    let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    let mut v = DVector::from_iterator(n, direction.iter().map(|x| x / norm));
    // v = u + sign(u₀)e₁ avoids cancellation; H u = −sign(u₀) e₁.
    let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
    v[0] += sign;
    let vv = v.dot(&v);
    let mut h = DMatrix::identity(n, n);
    h.ger(-2.0 / vv, &v, &v, 1.0);
    Ok(h)
}

fn secular(p: &[f64], q: &[f64], lambda: f64) -> f64 {
    p.iter().zip(q).filter(|(_, q)| **q != 0.0).map(|(p, q)| q * q / (p - lambda)).sum()
}

/// `R(λ) = Σ qᵢ²/(pᵢ − λ)` for `λ` above every active pole.
pub fn arrowhead_r(view: &ArrowheadView, lambda: f64) -> Result<f64> {
    let pole = view.max_pole();
    if !(lambda > pole) {
        return Err(Error::InvalidParameter(format!("lambda = {lambda} is not above the largest pole {pole}")));
    }
    Ok(secular(&view.p_eigvals, &view.q_coords, lambda))
}

/// Solves `Σ qᵢ²/(pᵢ − λ) = target` (`target < 0`) on the branch above the
/// largest active pole, by bisection to the last representable digit.
fn secular_inverse(p: &[f64], q: &[f64], pole: f64, q_norm_sq: f64, target: f64) -> f64 {
    let gap_scale = pole.abs().max(q_norm_sq / -target).max(f64::MIN_POSITIVE);
    let mut lo = pole + 1e-14 * gap_scale;
    let mut hi = pole + q_norm_sq / -target;
    if secular(p, q, lo) >= target {
        return lo;
    }
    // At `hi` every term is at least its share of the bound.
    while secular(p, q, hi) < target {
        hi = pole + 2.0 * (hi - pole);
    }
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return 0.5 * (lo + hi);
        }
        if secular(p, q, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

/// `L(μ) = max(R⁻¹(−1/μ), λ₁(P))`, the top eigenvalue of `P + μqqᵀ`.
pub fn arrowhead_l(view: &ArrowheadView, mu: f64) -> Result<f64> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::InvalidParameter(format!("mu must be positive, got {mu}")));
    }
    let r_inv = secular_inverse(&view.p_eigvals, &view.q_coords, view.max_pole(), view.q_norm_sq(), -1.0 / mu);
    Ok(r_inv.max(view.p_top()))
}

/// Top eigenpair of the arrowhead matrix through the scalar fixed point
/// `L(μ) = a + 1/μ`; `λ₁ = L(μ*)`.
pub fn arrowhead_solve(view: &ArrowheadView) -> Result<ArrowheadSolution> {
    if view.q_coords.iter().all(|&q| q == 0.0) {
        return Err(Error::ZeroVector);
    }
    let h = |mu: f64| -> Result<f64> { Ok(arrowhead_l(view, mu)? - view.a_scalar - 1.0 / mu) };
    let (mut lo, mut hi) = (1.0, 1.0);
    while h(lo)? >= 0.0 {
        lo *= 0.5;
    }
    while h(hi)? <= 0.0 {
        hi *= 2.0;
    }
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if h(mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mu_star = 0.5 * (lo + hi);
    let lambda1 = arrowhead_l(view, mu_star)?;
    let pole = view.max_pole();
    let r_inv = secular_inverse(&view.p_eigvals, &view.q_coords, pole, view.q_norm_sq(), -1.0 / mu_star);
    let top = view.p_top();
    let tie_tol = 1e-12 * top.abs().max(1.0);
    let cos_sq = if r_inv > top + tie_tol {
        CosSqInterval::point(1.0 / (1.0 + view.r_prime(lambda1)))
    } else if r_inv < top - tie_tol {
        CosSqInterval::point(0.0)
    } else {
        let right = if top > pole { 1.0 / (1.0 + view.r_prime(top)) } else { 0.0 };
        CosSqInterval { lo: 0.0, hi: right }
    };
    Ok(ArrowheadSolution { mu_star, lambda1, cos_sq })
}

fn spiked_weights(z_diag: &[f64], v: &[f64], mu: f64) -> Result<Vec<f64>> {
    if z_diag.len() != v.len() || z_diag.is_empty() {
        return Err(Error::DimensionMismatch(format!("{} diagonal entries, {} vector entries", z_diag.len(), v.len())));
    }
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::InvalidParameter(format!("mu must be positive, got {mu}")));
    }
    if v.iter().all(|&x| x == 0.0) {
        return Err(Error::ZeroVector);
    }
    let c = (mu / z_diag.len() as f64).sqrt();
    Ok(v.iter().map(|x| x * c).collect())
}

/// Leading eigenvalue of `Z + (μ/m) vvᵀ` with `Z = diag(z_diag)`, from the
/// secular equation `1 + (μ/m) Σ vᵢ²/(zᵢ − λ) = 0`.
pub fn spiked_diag_top(z_diag: &[f64], v: &[f64], mu: f64) -> Result<f64> {
    let q = spiked_weights(z_diag, v, mu)?;
    let pole = z_diag.iter().zip(&q).filter(|(_, q)| **q != 0.0).map(|(z, _)| *z).fold(f64::NEG_INFINITY, f64::max);
    let qn: f64 = q.iter().map(|x| x * x).sum();
    let root = secular_inverse(z_diag, &q, pole, qn, -1.0);
    Ok(root.max(z_diag.iter().copied().fold(f64::NEG_INFINITY, f64::max)))
}

/// Full spectrum of `Z + (μ/m) vvᵀ`, ascending. Equal diagonal entries are
/// deflated: a group of `g` equal values keeps `g − 1` eigenvalues at that
/// value and contributes one pole of the secular equation, which has one
/// root between consecutive poles and one above the largest.
pub fn spiked_diag_spectrum(z_diag: &[f64], v: &[f64], mu: f64) -> Result<Vec<f64>> {
    let q = spiked_weights(z_diag, v, mu)?;
    let mut idx: Vec<usize> = (0..z_diag.len()).collect();
    idx.sort_by(|&a, &b| z_diag[a].total_cmp(&z_diag[b]));
    let mut out = Vec::with_capacity(z_diag.len());
    let mut poles: Vec<f64> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let value = z_diag[idx[i]];
        let mut j = i;
        let mut w = 0.0;
        while j < idx.len() && z_diag[idx[j]] == value {
            w += q[idx[j]] * q[idx[j]];
            j += 1;
        }
        let g = j - i;
        if w > 0.0 {
            out.extend(std::iter::repeat(value).take(g - 1));
            poles.push(value);
            weights.push(w.sqrt());
        } else {
            out.extend(std::iter::repeat(value).take(g));
        }
        i = j;
    }
    // f(λ) = 1 + Σ wₖ²/(pₖ − λ) increases on each interval between poles.
    let f = |l: f64| 1.0 + secular(&poles, &weights, l);
    for k in 0..poles.len() {
        let (mut lo, mut hi) = if k + 1 < poles.len() {
            (poles[k], poles[k + 1])
        } else {
            let total: f64 = weights.iter().map(|w| w * w).sum();
            (poles[k], poles[k] + total)
        };
        loop {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        out.push(0.5 * (lo + hi));
    }
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// `(1/m) Σ zᵢ aᵢ`.
pub fn linear_estimate(batch: &SensingBatch) -> Result<DVector<f64>> {
    batch.check()?;
    let z = DVector::from_column_slice(&batch.z);
    Ok(batch.a.tr_mul(&z) / batch.m() as f64)
}

/// `√mean(y)` for quadratic measurements `y = (aᵀξ)²`.
pub fn estimate_norm_phase(y: &[f64]) -> Result<f64> {
    if y.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidParameter("quadratic measurements must be nonnegative".into()));
    }
    estimate_norm_mom(y, |mean| Some(mean.sqrt()))
}

/// Method of moments: `w⁻¹(mean(y))`, where `w(κ) = E y` for a signal of
/// norm `κ`. `w_inverse` returns `None` outside its domain.
pub fn estimate_norm_mom(y: &[f64], w_inverse: impl Fn(f64) -> Option<f64>) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::InvalidParameter("no measurements".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("measurements must be finite".into()));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    w_inverse(mean).ok_or_else(|| Error::InvalidParameter(format!("mean {mean} is outside the domain of the inverse moment map")))
}

/// One instance of the arrowhead-versus-dense comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleCase {
    pub n: usize,
    pub seed: u64,
    pub lambda1_dense: f64,
    pub lambda1_arrowhead: f64,
    pub cos_sq_dense: f64,
    pub cos_sq_arrowhead: CosSqInterval,
    pub lambda2_dense: f64,
    /// Top two eigenvalues of the trailing block in the signal frame.
    pub p_top_two: (f64, f64),
    pub interlacing_ok: bool,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub tolerance: f64,
    pub cases: Vec<OracleCase>,
    pub max_lambda_err: f64,
    pub max_cos_sq_err: f64,
    pub failed: usize,
}

impl OracleReport {
    pub fn pass(&self) -> bool {
        self.failed == 0
    }
}

/// Tolerance of the arrowhead oracle comparison.
pub const ORACLE_TOL: f64 = 1e-8;

fn dense_top_two(d: &DMatrix<f64>) -> (f64, f64, DVector<f64>) {
    let eig = SymmetricEigen::new(d.clone());
    let mut order: Vec<usize> = (0..d.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let second = order.get(1).map_or(f64::NEG_INFINITY, |&i| eig.eigenvalues[i]);
    (eig.eigenvalues[order[0]], second, eig.eigenvectors.column(order[0]).into_owned())
}

fn oracle_case(d: &DMatrix<f64>, xi: &[f64], n: usize, seed: u64, perturb_a: f64) -> Result<OracleCase> {
    let mut view = ArrowheadView::from_matrix(d, xi)?;
    view.a_scalar += perturb_a;
    let sol = arrowhead_solve(&view)?;
    let (l1, l2, v) = dense_top_two(d);
    let cos = cosine_sq(xi, v.as_slice())?;
    let p = &view.p_eigvals;
    let p1 = p[p.len() - 1];
    let p2 = if p.len() > 1 { p[p.len() - 2] } else { f64::NEG_INFINITY };
    let slack = 1e-12 * l1.abs().max(1.0);
    let interlacing_ok = p2 <= l2 + slack && l2 <= p1 + slack;
    let lambda_ok = (sol.lambda1 - l1).abs() <= ORACLE_TOL * l1.abs().max(1.0);
    let cos_ok = cos >= sol.cos_sq.lo - ORACLE_TOL && cos <= sol.cos_sq.hi + ORACLE_TOL;
    Ok(OracleCase {
        n,
        seed,
        lambda1_dense: l1,
        lambda1_arrowhead: sol.lambda1,
        cos_sq_dense: cos,
        cos_sq_arrowhead: sol.cos_sq,
        lambda2_dense: l2,
        p_top_two: (p1, p2),
        interlacing_ok,
        pass: lambda_ok && cos_ok && interlacing_ok,
    })
}

/// Compares the arrowhead fixed point with a dense eigendecomposition and
/// checks Cauchy interlacing. Each random instance uses `m = 2n` Gaussian
/// sensing vectors, weights uniform on `[0, 1]` and a Gaussian signal
/// direction. The 2×2 hand case `[[0, 1], [1, 0]]` with signal `e₁` is
/// always included. `perturb_a` is added to the top-left entry of every
/// view before solving (zero for a genuine check).
pub fn oracle_check(dims: &[usize], seeds: u64, perturb_a: f64) -> Result<OracleReport> {
    let mut cases = Vec::new();
    let hand = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
    cases.push(oracle_case(&hand, &[1.0, 0.0], 2, 0, perturb_a)?);
    for &n in dims {
        if n < 2 {
            return Err(Error::InvalidParameter(format!("oracle dimension must be at least 2, got {n}")));
        }
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(n as u64);
            let m = 2 * n;
            let a = DMatrix::from_fn(m, n, |_, _| StandardNormal.sample(&mut rng));
            let z: Vec<f64> = (0..m).map(|_| rand::Rng::gen::<f64>(&mut rng)).collect();
            let xi: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let batch = SensingBatch { a, y: z.clone(), z, xi: DVector::from_column_slice(&xi) };
            let d = build_data_matrix(&batch)?;
            cases.push(oracle_case(&d, &xi, n, seed, perturb_a)?);
        }
    }
    let max_lambda_err = cases
        .iter()
        .map(|c| (c.lambda1_arrowhead - c.lambda1_dense).abs() / c.lambda1_dense.abs().max(1.0))
        .fold(0.0, f64::max);
    let max_cos_sq_err = cases
        .iter()
        .map(|c| (c.cos_sq_dense - c.cos_sq_arrowhead.hi).max(c.cos_sq_arrowhead.lo - c.cos_sq_dense).max(0.0))
        .fold(0.0, f64::max);
    let failed = cases.iter().filter(|c| !c.pass).count();
    Ok(OracleReport { tolerance: ORACLE_TOL, cases, max_lambda_err, max_cos_sq_err, failed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_psd(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(m, n, |_, _| StandardNormal.sample(&mut rng));
        let z: Vec<f64> = (0..m).map(|_| rng.gen::<f64>()).collect();
        let batch = SensingBatch { a, y: z.clone(), z, xi: DVector::zeros(n) };
        build_data_matrix(&batch).unwrap()
    }

    fn dense_top(d: &DMatrix<f64>) -> (f64, f64, DVector<f64>) {
        let eig = SymmetricEigen::new(d.clone());
        let mut order: Vec<usize> = (0..d.nrows()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]], eig.eigenvectors.column(order[0]).into_owned())
    }

    #[test]
    fn data_matrix_examples() {
        let mut a = DMatrix::zeros(1, 3);
        a[(0, 0)] = 1.0;
        let b = SensingBatch { a, y: vec![1.0], z: vec![1.0], xi: DVector::zeros(3) };
        let d = build_data_matrix(&b).unwrap();
        let mut e = DMatrix::zeros(3, 3);
        e[(0, 0)] = 1.0;
        assert_eq!(d, e);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = DMatrix::from_fn(8, 8, |_, _| StandardNormal.sample(&mut rng));
        let z: Vec<f64> = (0..8).map(|_| rng.gen::<f64>()).collect();
        let zero = SensingBatch { a: a.clone(), y: vec![0.0; 8], z: vec![0.0; 8], xi: DVector::zeros(8) };
        assert!(build_data_matrix(&zero).unwrap().iter().all(|&v| v == 0.0));
        let b = SensingBatch { a: a.clone(), y: z.clone(), z: z.clone(), xi: DVector::zeros(8) };
        let d = build_data_matrix(&b).unwrap();
        let triple = a.transpose() * DMatrix::from_diagonal(&DVector::from_vec(z)) * &a / 8.0;
        assert!((d - triple).abs().max() < 1e-13);

        let bad = SensingBatch { a: DMatrix::zeros(2, 3), y: vec![0.0; 2], z: vec![0.0; 3], xi: DVector::zeros(3) };
        assert!(matches!(build_data_matrix(&bad), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn eigenpairs_small_cases() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.0]));
        let r = top_two_eigenpairs(&d, 1e-12).unwrap();
        assert!((r.lambda1 - 3.0).abs() < 1e-12 && (r.lambda2 - 2.0).abs() < 1e-12);
        assert!((r.x1[0].abs() - 1.0).abs() < 1e-12);

        let swap = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert!(matches!(top_two_eigenpairs(&swap, 1e-12), Err(Error::NotPsd(v)) if (v + 1.0).abs() < 1e-12));

        let zero = DMatrix::zeros(4, 4);
        let r = top_two_eigenpairs(&zero, 1e-10).unwrap();
        assert_eq!((r.lambda1, r.lambda2), (0.0, 0.0));
    }

    #[test]
    fn eigenpairs_match_dense_oracle() {
        for seed in 0..5 {
            let d = random_psd(50, 120, seed);
            let r = top_two_eigenpairs(&d, 1e-12).unwrap();
            let (l1, l2, v) = dense_top(&d);
            assert!((r.lambda1 - l1).abs() < 1e-10 * l1, "{} vs {l1}", r.lambda1);
            assert!((r.lambda2 - l2).abs() < 1e-10 * l1, "{} vs {l2}", r.lambda2);
            assert!((cosine_sq(&r.x1, v.as_slice()).unwrap() - 1.0).abs() < 1e-10);
            let x = DVector::from_column_slice(&r.x1);
            assert!((&d * &x - r.lambda1 * &x).norm() <= 1e-10 * r.lambda1);
        }
    }

    #[test]
    fn deterministic_and_reports_non_convergence() {
        let d = random_psd(200, 220, 9);
        let a = top_two_eigenpairs(&d, 1e-10).unwrap();
        let b = top_two_eigenpairs(&d, 1e-10).unwrap();
        assert_eq!(a, b);
        match top_two_eigenpairs_with(&d, 1e-14, 6) {
            Err(Error::NotConverged(r)) => assert!(r.residual > 1e-14 && r.iterations <= 6),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sq(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(cosine_sq(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        let h = 1.0 / 2f64.sqrt();
        assert!((cosine_sq(&[1.0, 0.0, 0.0], &[h, h, 0.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(cosine_sq(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn arrowhead_hand_cases() {
        let v = ArrowheadView::new(0.0, vec![0.0], vec![1.0]).unwrap();
        assert!((arrowhead_r(&v, 1.0).unwrap() + 1.0).abs() < 1e-15);
        assert!(arrowhead_r(&v, 0.0).is_err());
        for mu in [0.3, 1.0, 7.0] {
            assert!((arrowhead_l(&v, mu).unwrap() - mu).abs() < 1e-14 * mu.max(1.0));
        }
        let s = arrowhead_solve(&v).unwrap();
        assert!((s.mu_star - 1.0).abs() < 1e-12 && (s.lambda1 - 1.0).abs() < 1e-12);
        assert!((s.cos_sq.lo - 0.5).abs() < 1e-12 && s.cos_sq.width() == 0.0);

        let v = ArrowheadView::new(2.0, vec![1.0], vec![1.0]).unwrap();
        let s = arrowhead_solve(&v).unwrap();
        let l = (3.0 + 5f64.sqrt()) / 2.0;
        assert!((s.lambda1 - l).abs() < 1e-12);
        // eigenvector (λ−1, 1) of [[2,1],[1,1]]
        let want = (l - 1.0).powi(2) / ((l - 1.0).powi(2) + 1.0);
        assert!((s.cos_sq.lo - want).abs() < 1e-12);

        // Top eigenvalue of P unreachable from the border: clamp branch.
        let v = ArrowheadView::new(0.0, vec![0.0, 5.0], vec![1.0, 0.0]).unwrap();
        assert_eq!(arrowhead_l(&v, 1e-3).unwrap(), 5.0);
        let s = arrowhead_solve(&v).unwrap();
        assert_eq!(s.lambda1, 5.0);
        assert_eq!(s.cos_sq, CosSqInterval::point(0.0));
        assert!(matches!(ArrowheadView::new(1.0, vec![1.0], vec![0.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn arrowhead_l_is_rank_one_update_eigenvalue() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let p: Vec<f64> = (0..10).map(|_| rng.gen_range(0.0..3.0)).collect();
            let q: Vec<f64> = (0..10).map(|_| StandardNormal.sample(&mut rng)).collect();
            let view = ArrowheadView::new(0.5, p.clone(), q.clone()).unwrap();
            let grid: Vec<f64> = (1..50).map(|k| view.max_pole() + 0.1 * k as f64).collect();
            let vals: Vec<f64> = grid.iter().map(|&l| arrowhead_r(&view, l).unwrap()).collect();
            assert!(vals.windows(2).all(|w| w[0] < w[1]) && vals.iter().all(|&v| v < 0.0));
            let mu = rng.gen_range(0.1..5.0);
            let mut m = DMatrix::from_diagonal(&DVector::from_vec(p));
            let qv = DVector::from_vec(q);
            m.ger(mu, &qv, &qv, 1.0);
            let top = SymmetricEigen::new(m).eigenvalues.max();
            assert!((arrowhead_l(&view, mu).unwrap() - top).abs() < 1e-10 * top.abs().max(1.0));
        }
    }

    #[test]
    fn arrowhead_matches_dense_eigendecomposition() {
        for seed in 0..20 {
            let n = 30;
            let d = random_psd(n, 70, 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xi: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let view = ArrowheadView::from_matrix(&d, &xi).unwrap();
            let s = arrowhead_solve(&view).unwrap();
            let (l1, l2, v) = dense_top(&d);
            assert!((s.lambda1 - l1).abs() < 1e-10 * l1, "{} vs {l1}", s.lambda1);
            let cos = cosine_sq(&xi, v.as_slice()).unwrap();
            assert!((s.cos_sq.value().unwrap() - cos).abs() < 1e-10, "{:?} vs {cos}", s.cos_sq);
            let p = &view.p_eigvals;
            let (p1, p2) = (p[p.len() - 1], p[p.len() - 2]);
            assert!(p2 <= l2 + 1e-12 && l2 <= p1 + 1e-12);
        }
    }

    #[test]
    fn oracle_check_passes_and_detects_corruption() {
        let r = oracle_check(&[20], 5, 0.0).unwrap();
        assert!(r.pass(), "{r:?}");
        assert_eq!(r.cases.len(), 6);
        let hand = &r.cases[0];
        assert!((hand.lambda1_arrowhead - 1.0).abs() < 1e-12 && (hand.cos_sq_dense - 0.5).abs() < 1e-12);
        let bad = oracle_check(&[20], 5, 1.0).unwrap();
        assert_eq!(bad.failed, 6);
    }

    #[test]
    fn spiked_cases() {
        let m = 5;
        let mut v = vec![0.0; m];
        v[0] = (m as f64).sqrt();
        assert!((spiked_diag_top(&vec![0.0; m], &v, 1.0).unwrap() - 1.0).abs() < 1e-14);
        assert!(matches!(spiked_diag_top(&[1.0], &[0.0], 1.0), Err(Error::ZeroVector)));

        // m = 2: Z + (μ/2)vvᵀ against the closed-form 2×2 eigenvalues.
        let (z, v, mu): ([f64; 2], [f64; 2], f64) = ([0.3, 1.1], [0.7, -1.3], 1.7);
        let c = mu / 2.0;
        let (a, b, d) = (z[0] + c * v[0] * v[0], c * v[0] * v[1], z[1] + c * v[1] * v[1]);
        let mean = 0.5 * (a + d);
        let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
        assert!((spiked_diag_top(&z, &v, mu).unwrap() - (mean + rad)).abs() < 1e-14);
        let spec = spiked_diag_spectrum(&z, &v, mu).unwrap();
        assert!((spec[0] - (mean - rad)).abs() < 1e-14 && (spec[1] - (mean + rad)).abs() < 1e-14);
    }

    #[test]
    fn spiked_spectrum_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = 40;
        let z: Vec<f64> = (0..m).map(|_| if rng.gen::<f64>() < 0.3 { 1.0 } else { (rng.gen_range(0..3)) as f64 * 0.25 }).collect();
        let v: Vec<f64> = (0..m).map(|i| if i % 7 == 0 { 0.0 } else { StandardNormal.sample(&mut rng) }).collect();
        let mu = 2.5;
        let spec = spiked_diag_spectrum(&z, &v, mu).unwrap();
        let mut dense = DMatrix::from_diagonal(&DVector::from_vec(z.clone()));
        let vv = DVector::from_vec(v.clone());
        dense.ger(mu / m as f64, &vv, &vv, 1.0);
        let mut want = SymmetricEigen::new(dense).eigenvalues.as_slice().to_vec();
        want.sort_by(f64::total_cmp);
        for (a, b) in spec.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!((spiked_diag_top(&z, &v, mu).unwrap() - want[m - 1]).abs() < 1e-12);
    }

    #[test]
    fn linear_and_norm_estimators() {
        let mut a = DMatrix::zeros(1, 3);
        a[(0, 0)] = 1.0;
        let b = SensingBatch { a, y: vec![2.0], z: vec![2.0], xi: DVector::zeros(3) };
        assert_eq!(linear_estimate(&b).unwrap().as_slice(), &[2.0, 0.0, 0.0]);
        assert_eq!(estimate_norm_phase(&[9.0; 10]).unwrap(), 3.0);
        assert!(estimate_norm_phase(&[]).is_err());
        assert!(estimate_norm_phase(&[1.0, -1.0]).is_err());
        assert_eq!(estimate_norm_mom(&[2.0, 4.0], |m| Some(m)).unwrap(), 3.0);
        assert!(estimate_norm_mom(&[2.0], |m| (m > 5.0).then_some(m)).is_err());
        let y = [1.0, 4.0, 9.0];
        assert_eq!(estimate_norm_mom(&y, |m| Some(m.sqrt())).unwrap(), estimate_norm_phase(&y).unwrap());
    }
}
