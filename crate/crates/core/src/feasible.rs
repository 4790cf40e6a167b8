//! The feasible set of unit-level treatment probabilities at a given Gamma,
//! the null moments of the statistic vector, and Euclidean projection.
//!
//! Within stratum `i`, a probability vector is feasible iff it sums to one,
//! is non-negative, and `max_j rho_ij <= Gamma * min_j rho_ij`. The auxiliary
//! scale `s_i` of the linear-fractional form is eliminated analytically.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::model::{ScoreMatrix, StrataLayout};
use crate::scalar::Scalar;

/// Equality tolerance for the per-stratum sum.
pub const SUM_TOL: f64 = 1e-10;
/// Relative tolerance for the `max <= Gamma * min` constraint.
pub const RATIO_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector<T> {
    rho: Vec<T>,
    gamma: T,
}

impl<T: Scalar> ProbVector<T> {
    /// Validates feasibility for `gamma` on `layout`.
    pub fn new(layout: &StrataLayout, rho: Vec<T>, gamma: T) -> Result<Self> {
        check_gamma(gamma)?;
        if rho.len() != layout.num_units() {
            return Err(Error::Dimension(format!("expected {} probabilities, got {}", layout.num_units(), rho.len())));
        }
        let v = Self { rho, gamma };
        if let Some(i) = v.first_violation(layout) {
            return Err(Error::Invalid(format!("stratum {} violates the Gamma = {gamma} constraints", i + 1)));
        }
        Ok(v)
    }

    pub(crate) fn new_unchecked(rho: Vec<T>, gamma: T) -> Self {
        Self { rho, gamma }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.rho
    }

    pub fn into_vec(self) -> Vec<T> {
        self.rho
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    /// Membership test at this vector's Gamma.
    pub fn is_feasible(&self, layout: &StrataLayout) -> bool {
        self.first_violation(layout).is_none()
    }

    /// Membership test at another Gamma.
    pub fn is_feasible_at(&self, layout: &StrataLayout, gamma: T) -> bool {
        is_member(layout, &self.rho, gamma)
    }

    fn first_violation(&self, layout: &StrataLayout) -> Option<usize> {
        (0..layout.num_strata()).find(|&i| !stratum_member(&self.rho[layout.range(i)], self.gamma))
    }
}

fn check_gamma<T: Scalar>(gamma: T) -> Result<()> {
    if !(gamma >= T::one()) || !gamma.is_finite() {
        return Err(Error::GammaBelowOne(gamma.as_f64()));
    }
    Ok(())
}

fn stratum_member<T: Scalar>(x: &[T], gamma: T) -> bool {
    let sum: T = x.iter().copied().sum();
    if (sum - T::one()).abs() > T::tol(SUM_TOL) {
        return false;
    }
    let min = x.iter().copied().fold(T::infinity(), T::min);
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    min >= T::zero() && max <= gamma * min * (T::one() + T::tol(RATIO_TOL)) + T::tol(SUM_TOL)
}

/// Whether `rho` lies in the feasible polytope for `gamma`.
pub fn is_member<T: Scalar>(layout: &StrataLayout, rho: &[T], gamma: T) -> bool {
    rho.len() == layout.num_units() && (0..layout.num_strata()).all(|i| stratum_member(&rho[layout.range(i)], gamma))
}

/// `rho_ij = 1 / n_i`: the randomized-experiment probabilities (Gamma = 1).
pub fn uniform_probs<T: Scalar>(layout: &StrataLayout) -> ProbVector<T> {
    let mut rho = Vec::with_capacity(layout.num_units());
    for &n in layout.sizes() {
        let p = T::one() / T::from_usize(n).unwrap();
        rho.extend(std::iter::repeat(p).take(n));
    }
    ProbVector { rho, gamma: T::one() }
}

/// A random feasible point: within each stratum, weights drawn uniformly in
/// `[1, Gamma]` and normalized.
pub fn random_probs<T: Scalar, R: Rng + ?Sized>(layout: &StrataLayout, gamma: T, rng: &mut R) -> ProbVector<T> {
    let g = gamma.as_f64();
    let mut rho = Vec::with_capacity(layout.num_units());
    for &n in layout.sizes() {
        let w: Vec<f64> = (0..n).map(|_| 1.0 + (g - 1.0) * rng.random::<f64>()).collect();
        let total: f64 = w.iter().sum();
        rho.extend(w.iter().map(|v| T::lit(v / total)));
    }
    ProbVector { rho, gamma }
}

/// A random vertex: within each stratum a random non-empty proper subset of
/// units sits at `Gamma * s_i`, the rest at `s_i`.
pub fn random_vertex<T: Scalar, R: Rng + ?Sized>(layout: &StrataLayout, gamma: T, rng: &mut R) -> ProbVector<T> {
    let mut rho = Vec::with_capacity(layout.num_units());
    for &n in layout.sizes() {
        let high = rng.random_range(1..n);
        let mut flags = vec![false; n];
        let mut placed = 0;
        while placed < high {
            let j = rng.random_range(0..n);
            if !flags[j] {
                flags[j] = true;
                placed += 1;
            }
        }
        let total = T::from_usize(n - high).unwrap() + gamma * T::from_usize(high).unwrap();
        let s = T::one() / total;
        rho.extend(flags.iter().map(|&h| if h { gamma * s } else { s }));
    }
    ProbVector { rho, gamma }
}

/// Null expectation and covariance of the statistic vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments<T> {
    pub mu: Vec<T>,
    pub sigma: SymMatrix<T>,
}

/// Positive-definiteness diagnosis of a covariance matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdCheck<T> {
    pub min_eigenvalue: T,
    pub trace: T,
}

impl<T: Scalar> PdCheck<T> {
    /// Smallest eigenvalue above `1e-12 * trace`.
    pub fn is_positive_definite(&self) -> bool {
        self.trace > T::zero() && self.min_eigenvalue > T::tol(1e-12) * self.trace
    }

    /// Ridge to add when the matrix is not positive definite.
    pub fn ridge(&self) -> T {
        T::tol(1e-10) * self.trace.max(T::min_positive_value())
    }
}

impl<T: Scalar> Moments<T> {
    pub fn pd_check(&self) -> PdCheck<T> {
        PdCheck { min_eigenvalue: self.sigma.min_eigenvalue(), trace: self.sigma.trace() }
    }

    /// Covariance with the ridge policy applied; the flag reports whether a
    /// ridge of `1e-10 * trace` was needed.
    pub fn regularized_sigma(&self) -> (SymMatrix<T>, bool) {
        let check = self.pd_check();
        if check.is_positive_definite() {
            (self.sigma.clone(), false)
        } else {
            let mut s = self.sigma.clone();
            s.add_ridge(check.ridge());
            (s, true)
        }
    }
}

/// `mu_k = sum_ij q_ijk rho_ij`,
/// `Sigma_kl = sum_i { sum_j q_ijk q_ijl rho_ij - (sum_j q_ijk rho_ij)(sum_j q_ijl rho_ij) }`.
pub fn compute_moments<T: Scalar>(q: &ScoreMatrix<T>, rho: &[T]) -> Moments<T> {
    let k = q.num_outcomes();
    let layout = q.layout();
    debug_assert_eq!(rho.len(), layout.num_units());
    let mut mu = vec![T::zero(); k];
    let mut sig = vec![T::zero(); k * k];
    let mut m = vec![T::zero(); k];
    for i in 0..layout.num_strata() {
        m.iter_mut().for_each(|v| *v = T::zero());
        for u in layout.range(i) {
            let p = rho[u];
            let row = q.row(u);
            for a in 0..k {
                let pa = row[a] * p;
                m[a] = m[a] + pa;
                for b in a..k {
                    sig[a * k + b] = sig[a * k + b] + pa * row[b];
                }
            }
        }
        for a in 0..k {
            mu[a] = mu[a] + m[a];
            for b in a..k {
                sig[a * k + b] = sig[a * k + b] - m[a] * m[b];
            }
        }
    }
    let mut sigma = SymMatrix::zeros(k);
    for a in 0..k {
        for b in a..k {
            sigma.set(a, b, sig[a * k + b]);
        }
    }
    Moments { mu, sigma }
}

/// Result of a projection with its optimality certificate.
#[derive(Debug, Clone)]
pub struct Projection<T> {
    pub probs: ProbVector<T>,
    /// Largest KKT residual over strata (primal feasibility, multiplier signs,
    /// stationarity in the eliminated scale).
    pub kkt_residual: T,
}

/// Euclidean projection of `raw` onto the feasible polytope, stratum by stratum.
pub fn project_onto_pgamma<T: Scalar>(raw: &[T], layout: &StrataLayout, gamma: T) -> Result<ProbVector<T>> {
    Ok(project_certified(raw, layout, gamma)?.probs)
}

pub fn project_certified<T: Scalar>(raw: &[T], layout: &StrataLayout, gamma: T) -> Result<Projection<T>> {
    check_gamma(gamma)?;
    if raw.len() != layout.num_units() {
        return Err(Error::Dimension(format!("expected {} values, got {}", layout.num_units(), raw.len())));
    }
    let mut out = vec![T::zero(); raw.len()];
    let mut worst = T::zero();
    let mut scratch = Vec::new();
    for i in 0..layout.num_strata() {
        let r = layout.range(i);
        let res = project_stratum(&raw[r.clone()], gamma, &mut out[r], &mut scratch);
        worst = worst.max(res);
    }
    Ok(Projection { probs: ProbVector { rho: out, gamma }, kkt_residual: worst })
}

/// Projection in place, reusing `out`; used by the solver's inner loop.
pub(crate) fn project_into<T: Scalar>(raw: &[T], layout: &StrataLayout, gamma: T, out: &mut [T]) {
    let mut scratch = Vec::new();
    for i in 0..layout.num_strata() {
        let r = layout.range(i);
        project_stratum(&raw[r.clone()], gamma, &mut out[r], &mut scratch);
    }
}

/// `min c'rho` over the feasible polytope.
///
/// Each stratum's polytope has vertices with some units at `Gamma s` and the
/// rest at `s`; the best vertex puts the high level on the smallest costs.
pub fn linear_minimum<T: Scalar>(c: &[T], layout: &StrataLayout, gamma: T) -> T {
    let mut total = T::zero();
    let mut order: Vec<usize> = Vec::new();
    for i in 0..layout.num_strata() {
        let r = layout.range(i);
        let cs = &c[r];
        let n = cs.len();
        if n == 2 {
            let lo = cs[0].min(cs[1]);
            let hi = cs[0].max(cs[1]);
            total = total + (gamma * lo + hi) / (gamma + T::one());
            continue;
        }
        order.clear();
        order.extend(0..n);
        order.sort_by(|&a, &b| cs[a].partial_cmp(&cs[b]).unwrap_or(std::cmp::Ordering::Equal));
        let all: T = cs.iter().copied().sum();
        let mut best = all / T::from_usize(n).unwrap();
        let mut head = T::zero();
        for (h, &j) in order.iter().enumerate().take(n - 1) {
            head = head + cs[j];
            let hh = T::from_usize(h + 1).unwrap();
            let v = (gamma * head + (all - head)) / (hh * gamma + T::from_usize(n).unwrap() - hh);
            best = best.min(v);
        }
        total = total + best;
    }
    total
}

/// Projects one stratum; returns the KKT residual.
///
/// The optimum has the form `x_j = clamp(y_j - nu, s, Gamma s)` with a lower
/// block L (smallest `y`), an upper block H (largest `y`) and a free middle.
/// For each candidate (|L|, |H|) the stationarity conditions are two linear
/// equations in `(nu, s)`; the consistent candidate is the projection.
fn project_stratum<T: Scalar>(y: &[T], gamma: T, out: &mut [T], order: &mut Vec<usize>) -> T {
    let n = y.len();
    let one = T::one();
    let two = T::lit(2.0);
    if gamma == one {
        let p = one / T::from_usize(n).unwrap();
        out.iter_mut().for_each(|v| *v = p);
        return T::zero();
    }
    if n == 2 {
        let lo = one / (one + gamma);
        let hi = gamma / (one + gamma);
        let x1 = ((y[0] - y[1] + one) / two).max(lo).min(hi);
        out[0] = x1;
        out[1] = one - x1;
        return T::zero();
    }

    order.clear();
    order.extend(0..n);
    order.sort_by(|&a, &b| y[a].partial_cmp(&y[b]).unwrap_or(std::cmp::Ordering::Equal));
    let sorted: Vec<T> = order.iter().map(|&j| y[j]).collect();
    let mut prefix = vec![T::zero(); n + 1];
    for j in 0..n {
        prefix[j + 1] = prefix[j] + sorted[j];
    }
    let total = prefix[n];
    let scale = sorted.iter().fold(one, |acc, v| acc.max(v.abs()));
    let tol = T::tol(1e-12) * scale;

    // unconstrained-ratio candidate
    let nu0 = (total - one) / T::from_usize(n).unwrap();
    let min0 = sorted[0] - nu0;
    let max0 = sorted[n - 1] - nu0;
    if min0 > T::zero() && max0 <= gamma * min0 + tol {
        for j in 0..n {
            out[j] = y[j] - nu0;
        }
        return residual(y, out, gamma, nu0, min0, &[], &[]);
    }

    let mut best: Option<(T, T, T)> = None; // (violation, nu, s)
    for a in 1..n {
        for b in 1..=(n - a) {
            let m = n - a - b;
            let sl = prefix[a];
            let sh = total - prefix[n - b];
            let sm = prefix[n - b] - prefix[a];
            let af = T::from_usize(a).unwrap();
            let bf = T::from_usize(b).unwrap();
            let mf = T::from_usize(m).unwrap();
            let c1 = af + bf * gamma;
            let c2 = af + bf * gamma * gamma;
            let rhs1 = one - sm;
            let rhs2 = sl + gamma * sh;
            let det = c1 * c1 + mf * c2;
            let s = (rhs1 * c1 + mf * rhs2) / det;
            let nu = (c1 * rhs2 - c2 * rhs1) / det;
            let mut viol = (-s).max(T::zero());
            for (j, &v) in sorted.iter().enumerate() {
                let z = v - nu;
                let e = if j < a {
                    z - s
                } else if j >= n - b {
                    gamma * s - z
                } else {
                    (s - z).max(z - gamma * s)
                };
                viol = viol.max(e);
            }
            if best.map_or(true, |(bv, _, _)| viol < bv) {
                best = Some((viol, nu, s));
            }
            if viol <= tol {
                break;
            }
        }
        if best.is_some_and(|(v, _, _)| v <= tol) {
            break;
        }
    }
    let (_, nu, s) = best.expect("at least one candidate");
    for j in 0..n {
        out[j] = (y[j] - nu).max(s).min(gamma * s);
    }
    // renormalize away rounding in the 2x2 solve
    let sum: T = out.iter().copied().sum();
    out.iter_mut().for_each(|v| *v = *v / sum);
    residual(y, out, gamma, nu, s, &[], &[])
}

fn residual<T: Scalar>(y: &[T], x: &[T], gamma: T, nu: T, s: T, _l: &[usize], _h: &[usize]) -> T {
    let one = T::one();
    let sum: T = x.iter().copied().sum();
    let mut r = (sum - one).abs();
    let mut lower = T::zero();
    let mut upper = T::zero();
    for (&yj, &xj) in y.iter().zip(x) {
        r = r.max(s - xj).max(xj - gamma * s);
        // x_j - y_j + nu = alpha_j - beta_j
        let g = xj - yj + nu;
        if g > T::zero() {
            lower = lower + g;
        } else {
            upper = upper - g;
        }
        // multipliers only where the bound is active
        let at_low = (xj - s).abs() <= T::tol(1e-12);
        let at_high = (xj - gamma * s).abs() <= T::tol(1e-12);
        if !at_low && !at_high {
            r = r.max(g.abs());
        } else if at_low && !at_high {
            r = r.max(-g);
        } else if at_high && !at_low {
            r = r.max(g);
        }
    }
    let scale = one.max(lower);
    r.max((lower - gamma * upper).abs() / scale)
}

/// All `2^I` vertices of the feasible set for `I` pairs (a single point at Gamma = 1).
pub fn extreme_points_pairs<T: Scalar>(gamma: T, pairs: usize) -> Result<impl Iterator<Item = ProbVector<T>>> {
    check_gamma(gamma)?;
    const LIMIT: usize = 20;
    if pairs > LIMIT {
        return Err(Error::TooLarge { what: "pairs for vertex enumeration", value: pairs, limit: LIMIT });
    }
    let lo = T::one() / (T::one() + gamma);
    let hi = gamma / (T::one() + gamma);
    let count: u64 = if gamma == T::one() { 1 } else { 1u64 << pairs };
    Ok((0..count).map(move |mask| {
        let mut rho = Vec::with_capacity(2 * pairs);
        for i in 0..pairs {
            let p = if (mask >> i) & 1 == 1 { hi } else { lo };
            rho.push(p);
            rho.push(T::one() - p);
        }
        ProbVector { rho, gamma }
    }))
}
