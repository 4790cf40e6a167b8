//! The two-person game between hidden bias and the choice of outcome
//! combination.
//!
//! For fixed probabilities `rho`, the analyst's best response maximizes the
//! standardized deviate `lambda'(t - mu) / sqrt(lambda' Sigma lambda)` over
//! the allowed set of combinations. The adversary then minimizes the squared
//! positive part of that value over the feasible polytope by projected
//! subgradient descent; the objective is convex in `rho`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feasible::{compute_moments, linear_minimum, project_into, random_probs, uniform_probs, Moments, ProbVector};
use crate::linalg::{dot, norm2, SymMatrix};
use crate::model::ScoreMatrix;
use crate::qp::solve_nonneg_qp;
use crate::scalar::Scalar;

/// Set of outcome combinations the analyst may choose from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "vectors", rename_all = "kebab-case")]
pub enum LambdaSpec<T> {
    /// The nonnegative orthant without the origin.
    Cone,
    /// A finite list of nonzero directions.
    Finite(Vec<Vec<T>>),
    /// Every nonzero direction. Not a valid test of a one-sided null; kept as
    /// a negative control.
    Unconstrained,
}

impl<T: Scalar> LambdaSpec<T> {
    pub fn singleton(lambda: Vec<T>) -> Self {
        Self::Finite(vec![lambda])
    }

    /// `{1_K}`.
    pub fn equal_weight(k: usize) -> Self {
        Self::Finite(vec![vec![T::one(); k]])
    }

    /// `{e_1, ..., e_K}`.
    pub fn per_outcome(k: usize) -> Self {
        Self::Finite(
            (0..k)
                .map(|i| (0..k).map(|j| if i == j { T::one() } else { T::zero() }).collect())
                .collect(),
        )
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if let Self::Finite(set) = self {
            if set.is_empty() {
                return Err(Error::Lambda("finite set is empty".into()));
            }
            for (i, v) in set.iter().enumerate() {
                if v.len() != k {
                    return Err(Error::Lambda(format!("direction {i} has length {}, expected {k}", v.len())));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Lambda(format!("direction {i} is not finite")));
                }
                if v.iter().all(|&x| x == T::zero()) {
                    return Err(Error::Lambda(format!("direction {i} is the zero vector")));
                }
            }
        }
        Ok(())
    }

    /// Number of directions for multiplicity corrections, if finite.
    pub fn len(&self) -> Option<usize> {
        match self {
            Self::Finite(v) => Some(v.len()),
            _ => None,
        }
    }

    /// Whether `lambda` belongs to the set (up to positive scaling for the cone).
    pub fn contains(&self, lambda: &[T]) -> bool {
        let nonzero = lambda.iter().any(|&x| x != T::zero());
        match self {
            Self::Cone => nonzero && lambda.iter().all(|&x| x >= T::zero()),
            Self::Unconstrained => nonzero,
            Self::Finite(set) => set.iter().any(|v| v.as_slice() == lambda),
        }
    }
}

/// Value of the inner maximization and a maximizing direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerSup<T> {
    /// Signed supremum of the standardized deviate.
    pub value: T,
    pub lambda: Vec<T>,
}

fn check_dims<T: Scalar>(d: &[T], sigma: &SymMatrix<T>) -> Result<()> {
    if sigma.dim() != d.len() {
        return Err(Error::Dimension(format!("Sigma is {0}x{0} but d has length {1}", sigma.dim(), d.len())));
    }
    Ok(())
}

/// `sup_{lambda >= 0, lambda != 0} lambda'd / sqrt(lambda' Sigma lambda)`.
///
/// When the supremum is positive it equals `sqrt(lambda*' d)` where `lambda*`
/// solves the nonnegative QP `min 1/2 l'Sigma l - l'd`; otherwise every
/// direction gives a non-positive deviate and the supremum is attained on an
/// extreme ray.
pub fn coherent_sup<T: Scalar>(d: &[T], sigma: &SymMatrix<T>) -> Result<InnerSup<T>> {
    check_dims(d, sigma)?;
    if sigma.cholesky().is_none() {
        return Err(Error::NotPositiveDefinite("covariance of the statistics".into()));
    }
    Ok(coherent_sup_unchecked(d, sigma))
}

fn coherent_sup_unchecked<T: Scalar>(d: &[T], sigma: &SymMatrix<T>) -> InnerSup<T> {
    let sol = solve_nonneg_qp(sigma, d);
    let total: T = sol.x.iter().copied().sum();
    if sol.value_sq > T::zero() && total > T::zero() {
        let lambda = sol.x.iter().map(|&v| v / total).collect();
        return InnerSup { value: sol.value_sq.sqrt(), lambda };
    }
    extreme_ray_sup(d, sigma)
}

fn extreme_ray_sup<T: Scalar>(d: &[T], sigma: &SymMatrix<T>) -> InnerSup<T> {
    let k = d.len();
    let (best, value) = (0..k)
        .map(|j| (j, d[j] / sigma.get(j, j).sqrt()))
        .fold((0, T::neg_infinity()), |acc, c| if c.1 > acc.1 { c } else { acc });
    let mut lambda = vec![T::zero(); k];
    lambda[best] = T::one();
    InnerSup { value, lambda }
}

/// Exhaustive maximum over a finite set of directions.
pub fn finite_sup<T: Scalar>(d: &[T], sigma: &SymMatrix<T>, set: &[Vec<T>]) -> Result<InnerSup<T>> {
    check_dims(d, sigma)?;
    let mut best: Option<InnerSup<T>> = None;
    for lambda in set {
        if lambda.len() != d.len() {
            return Err(Error::Lambda(format!("direction of length {} for K = {}", lambda.len(), d.len())));
        }
        let var = sigma.quad_form(lambda);
        if !(var > T::zero()) {
            return Err(Error::NonPositiveVariance(var.as_f64()));
        }
        let value = dot(lambda, d) / var.sqrt();
        if best.as_ref().map_or(true, |b| value > b.value) {
            best = Some(InnerSup { value, lambda: lambda.clone() });
        }
    }
    best.ok_or_else(|| Error::Lambda("finite set is empty".into()))
}

/// `sup` over all nonzero directions: `sqrt(d' Sigma^{-1} d)`, attained at `Sigma^{-1} d`.
pub fn unconstrained_sup<T: Scalar>(d: &[T], sigma: &SymMatrix<T>) -> Result<InnerSup<T>> {
    check_dims(d, sigma)?;
    let chol = sigma
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("covariance of the statistics".into()))?;
    let lambda = chol.solve(d);
    let value = dot(&lambda, d).max(T::zero()).sqrt();
    if value == T::zero() {
        let mut e = vec![T::zero(); d.len()];
        e[0] = T::one();
        return Ok(InnerSup { value, lambda: e });
    }
    Ok(InnerSup { value, lambda })
}

/// Inner supremum for any [`LambdaSpec`].
pub fn inner_sup<T: Scalar>(d: &[T], sigma: &SymMatrix<T>, spec: &LambdaSpec<T>) -> Result<InnerSup<T>> {
    match spec {
        LambdaSpec::Cone => coherent_sup(d, sigma),
        LambdaSpec::Finite(set) => finite_sup(d, sigma, set),
        LambdaSpec::Unconstrained => unconstrained_sup(d, sigma),
    }
}

/// Standardized deviate at given probabilities, with the ridge policy applied.
#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    pub sup: InnerSup<T>,
    pub moments: Moments<T>,
    /// `t - mu`.
    pub d: Vec<T>,
    /// Covariance actually used (ridged if needed).
    pub sigma: SymMatrix<T>,
    pub ridged: bool,
}

impl<T: Scalar> Evaluation<T> {
    /// Surrogate objective `max(0, value)^2`.
    pub fn surrogate(&self) -> T {
        let v = self.sup.value.max(T::zero());
        v * v
    }
}

pub fn evaluate<T: Scalar>(q: &ScoreMatrix<T>, t: &[T], rho: &[T], spec: &LambdaSpec<T>) -> Result<Evaluation<T>> {
    let moments = compute_moments(q, rho);
    let (sigma, ridged) = moments.regularized_sigma();
    let d: Vec<T> = t.iter().zip(&moments.mu).map(|(&a, &b)| a - b).collect();
    let sup = inner_sup(&d, &sigma, spec)?;
    Ok(Evaluation { sup, moments, d, sigma, ridged })
}

/// Gradient in `rho` of `h1 / h2` with `h1 = (lambda'(t - mu))^2` and
/// `h2 = lambda' Sigma lambda`, holding `lambda` fixed at the inner maximizer.
///
/// By Danskin's theorem this is a subgradient of the surrogate objective
/// wherever the deviate is positive.
pub fn subgradient<T: Scalar>(q: &ScoreMatrix<T>, t: &[T], rho: &[T], lambda: &[T]) -> Result<Vec<T>> {
    let moments = compute_moments(q, rho);
    let d: Vec<T> = t.iter().zip(&moments.mu).map(|(&a, &b)| a - b).collect();
    let mut g = vec![T::zero(); rho.len()];
    subgradient_into(q, rho, lambda, &d, &moments.sigma, &mut g)?;
    Ok(g)
}

fn subgradient_into<T: Scalar>(
    q: &ScoreMatrix<T>,
    rho: &[T],
    lambda: &[T],
    d: &[T],
    sigma: &SymMatrix<T>,
    g: &mut [T],
) -> Result<()> {
    let h2 = sigma.quad_form(lambda);
    if !(h2 > T::zero()) {
        return Err(Error::NonPositiveVariance(h2.as_f64()));
    }
    let ld = dot(lambda, d);
    let h1 = ld * ld;
    let two = T::lit(2.0);
    let layout = q.layout();
    let inv_h2 = T::one() / h2;
    let ratio = h1 * inv_h2 * inv_h2;
    for i in 0..layout.num_strata() {
        let r = layout.range(i);
        let m: T = r.clone().map(|u| dot(q.row(u), lambda) * rho[u]).sum();
        for u in r {
            let w = dot(q.row(u), lambda);
            let dh1 = -two * w * ld;
            let dh2 = w * w - two * w * m;
            g[u] = dh1 * inv_h2 - ratio * dh2;
        }
    }
    Ok(())
}

/// Step-size rule of the projected descent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    /// Barzilai-Borwein steps with a non-monotone backtracking line search.
    /// Finite direction sets are minimized through a log-sum-exp smoothing
    /// of the maximum whose temperature is lowered in stages.
    Spectral,
    /// Classical subgradient steps `t0 / sqrt(n)`.
    Diminishing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameOptions {
    pub step: StepRule,
    pub max_iter: usize,
    /// Relative improvement of the best objective below which the descent stops.
    pub tol: f64,
    /// Window for the improvement test of the diminishing rule.
    pub patience: usize,
    /// The spectral rule stops once the certified gap on the deviate is this small.
    pub gap_tol: f64,
    /// Stop as soon as the deviate is known to lie below or above this value.
    pub target: Option<f64>,
    /// Initial step of the diminishing rule; defaults to `1 / (1 + |g_0|)`.
    pub t0: Option<f64>,
    /// Additional descents from random feasible starts.
    pub restarts: usize,
    pub seed: u64,
    /// Keep the per-iteration best-objective trace.
    pub record_trace: bool,
}

impl Default for GameOptions {
    fn default() -> Self {
        Self {
            step: StepRule::Spectral,
            max_iter: 5000,
            tol: 1e-8,
            patience: 50,
            gap_tol: 1e-6,
            target: None,
            t0: None,
            restarts: 0,
            seed: 0,
            record_trace: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameResult<T> {
    /// Worst-case standardized deviate.
    pub a_star: T,
    /// Surrogate value `max(0, a_star)^2`.
    pub b_star: T,
    pub lambda_star: Vec<T>,
    pub rho_star: ProbVector<T>,
    pub iterations: usize,
    pub converged: bool,
    /// Best-so-far surrogate after each iteration.
    pub trace: Vec<T>,
    /// A ridge was added to a near-singular covariance at some iterate.
    pub ridged: bool,
    /// Descent stopped because the deviate became non-positive.
    pub early_exit: bool,
    /// Certified lower bound on `max(0, a_star)` from the linearization of the
    /// convex surrogate (spectral rule only; zero otherwise).
    pub lower_bound: T,
}

/// Minimizes the surrogate objective over the feasible polytope at `gamma`.
pub fn solve_worst_case<T: Scalar>(
    q: &ScoreMatrix<T>,
    gamma: T,
    spec: &LambdaSpec<T>,
    opts: &GameOptions,
) -> Result<GameResult<T>> {
    if !(gamma >= T::one()) || !gamma.is_finite() {
        return Err(Error::GammaBelowOne(gamma.as_f64()));
    }
    spec.validate(q.num_outcomes())?;
    let t = q.observed();
    let start = uniform_probs::<T>(q.layout());
    let mut best = descend(q, &t, gamma, spec, opts, start.into_vec())?;
    if gamma > T::one() && !best.early_exit {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        for _ in 0..opts.restarts {
            let start = random_probs(q.layout(), gamma, &mut rng).into_vec();
            let r = descend(q, &t, gamma, spec, opts, start)?;
            if r.b_star < best.b_star || (r.early_exit && r.a_star < best.a_star) {
                best = r;
            }
            if best.early_exit {
                break;
            }
        }
    }
    Ok(best)
}

fn descend<T: Scalar>(
    q: &ScoreMatrix<T>,
    t: &[T],
    gamma: T,
    spec: &LambdaSpec<T>,
    opts: &GameOptions,
    start: Vec<T>,
) -> Result<GameResult<T>> {
    match opts.step {
        StepRule::Spectral => descend_spectral(q, t, gamma, spec, opts, start),
        StepRule::Diminishing => descend_diminishing(q, t, gamma, spec, opts, start),
    }
}

fn descend_diminishing<T: Scalar>(
    q: &ScoreMatrix<T>,
    t: &[T],
    gamma: T,
    spec: &LambdaSpec<T>,
    opts: &GameOptions,
    start: Vec<T>,
) -> Result<GameResult<T>> {
    let layout = q.layout();
    let mut rho = start;
    let mut eval = evaluate(q, t, &rho, spec)?;
    let mut ridged = eval.ridged;
    let mut best_rho = rho.clone();
    let mut best_val = eval.sup.value;
    let mut best_lambda = eval.sup.lambda.clone();
    let mut trace = Vec::new();

    let finish = |a: T, lambda: Vec<T>, rho: Vec<T>, iterations, converged, trace, ridged, early_exit| {
        let b = a.max(T::zero());
        GameResult {
            a_star: a,
            b_star: b * b,
            lambda_star: lambda,
            rho_star: ProbVector::new_unchecked(rho, gamma),
            iterations,
            converged,
            trace,
            ridged,
            early_exit,
            lower_bound: T::zero(),
        }
    };

    if eval.sup.value <= T::zero() {
        return Ok(finish(eval.sup.value, eval.sup.lambda, rho, 0, true, trace, ridged, true));
    }
    if gamma == T::one() {
        return Ok(finish(eval.sup.value, eval.sup.lambda, rho, 0, true, trace, ridged, false));
    }

    let mut g = vec![T::zero(); rho.len()];
    let mut raw = vec![T::zero(); rho.len()];
    let mut t0 = T::zero();
    let mut anchor = eval.surrogate();
    let mut stale = 0;
    let tol = T::lit(opts.tol);

    for n in 1..=opts.max_iter {
        subgradient_into(q, &rho, &eval.sup.lambda, &eval.d, &eval.sigma, &mut g)?;
        if n == 1 {
            t0 = match opts.t0 {
                Some(v) => T::lit(v),
                None => T::one() / (T::one() + norm2(&g)),
            };
        }
        let step = t0 / T::from_usize(n).unwrap().sqrt();
        for ((r, &p), &gi) in raw.iter_mut().zip(&rho).zip(&g) {
            *r = p - step * gi;
        }
        project_into(&raw, layout, gamma, &mut rho);
        eval = evaluate(q, t, &rho, spec)?;
        ridged |= eval.ridged;

        if eval.sup.value <= T::zero() {
            return Ok(finish(eval.sup.value, eval.sup.lambda, rho, n, true, trace, ridged, true));
        }
        if eval.sup.value < best_val {
            best_val = eval.sup.value;
            best_rho.copy_from_slice(&rho);
            best_lambda.clone_from(&eval.sup.lambda);
        }
        let best_b = best_val * best_val;
        if opts.record_trace {
            trace.push(best_b);
        }
        if best_b < anchor * (T::one() - tol) {
            anchor = best_b;
            stale = 0;
        } else {
            stale += 1;
            if stale >= opts.patience {
                return Ok(finish(best_val, best_lambda, best_rho, n, true, trace, ridged, false));
            }
        }
    }
    Ok(finish(best_val, best_lambda, best_rho, opts.max_iter, false, trace, ridged, false))
}

/// Iterations without relative progress after which a spectral stage ends.
const SPECTRAL_PATIENCE: usize = 40;
/// Memory of the non-monotone line search.
const LINE_SEARCH_MEMORY: usize = 8;

/// Objective of the spectral rule at one point.
struct Probe<T> {
    eval: Evaluation<T>,
    /// Surrogate, smoothed by log-sum-exp for finite sets.
    fb: T,
    /// Gradient of `fb`.
    grad: Vec<T>,
    /// Weighted mean of the per-direction surrogates under the smoothing
    /// weights (the surrogate itself when not smoothed).
    mean: T,
}

impl<T: Scalar> Probe<T> {
    /// Descent objective `sqrt(fb)`: its gradient does not vanish as the
    /// deviate approaches zero, and it shares its minimizers with `fb`.
    fn root(&self) -> T {
        self.fb.sqrt()
    }

    fn root_grad_into(&self, out: &mut [T]) {
        let r = self.root();
        let inv = if r > T::zero() { T::one() / (T::lit(2.0) * r) } else { T::zero() };
        for (o, &g) in out.iter_mut().zip(&self.grad) {
            *o = g * inv;
        }
    }

    /// Lower bound on the minimum of the surrogate over the polytope.
    ///
    /// Every `b_l` is convex, so `sum_l w_l (b_l + grad b_l'(y - rho))`
    /// minorizes `max_l b_l(y)` for any weights on the simplex.
    fn lower_bound(&self, rho: &[T], layout: &crate::model::StrataLayout, gamma: T) -> T {
        self.mean + linear_minimum(&self.grad, layout, gamma) - dot(&self.grad, rho)
    }
}

fn probe<T: Scalar>(q: &ScoreMatrix<T>, t: &[T], rho: &[T], spec: &LambdaSpec<T>, mu: T) -> Result<Probe<T>> {
    let eval = evaluate(q, t, rho, spec)?;
    let mut grad = vec![T::zero(); rho.len()];
    let (fb, mean) = match spec {
        LambdaSpec::Finite(set) if set.len() > 1 => {
            let vals = set
                .iter()
                .map(|l| {
                    let var = eval.sigma.quad_form(l);
                    if !(var > T::zero()) {
                        return Err(Error::NonPositiveVariance(var.as_f64()));
                    }
                    let v = (dot(l, &eval.d) / var.sqrt()).max(T::zero());
                    Ok(v * v)
                })
                .collect::<Result<Vec<T>>>()?;
            let top = vals.iter().copied().fold(T::zero(), T::max);
            let w: Vec<T> = vals.iter().map(|&b| ((b - top) / mu).exp()).collect();
            let z: T = w.iter().copied().sum();
            let mut mean = T::zero();
            let mut tmp = vec![T::zero(); rho.len()];
            for ((l, &wl), &b) in set.iter().zip(&w).zip(&vals) {
                let wl = wl / z;
                mean = mean + wl * b;
                // directions with a non-positive deviate contribute a flat zero
                if b == T::zero() || wl < T::lit(1e-14) {
                    continue;
                }
                subgradient_into(q, rho, l, &eval.d, &eval.sigma, &mut tmp)?;
                for (g, &v) in grad.iter_mut().zip(&tmp) {
                    *g = *g + wl * v;
                }
            }
            (top + mu * z.ln(), mean)
        }
        _ => {
            if eval.sup.value > T::zero() {
                subgradient_into(q, rho, &eval.sup.lambda, &eval.d, &eval.sigma, &mut grad)?;
            }
            (eval.surrogate(), eval.surrogate())
        }
    };
    Ok(Probe { eval, fb, grad, mean })
}

fn inf_norm<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
}

fn descend_spectral<T: Scalar>(
    q: &ScoreMatrix<T>,
    t: &[T],
    gamma: T,
    spec: &LambdaSpec<T>,
    opts: &GameOptions,
    start: Vec<T>,
) -> Result<GameResult<T>> {
    let layout = q.layout();
    let n = start.len();
    let smooth = matches!(spec, LambdaSpec::Finite(set) if set.len() > 1);
    let mut x = start;
    let init = evaluate(q, t, &x, spec)?;
    let mut ridged = init.ridged;
    let mut trace = Vec::new();
    if init.sup.value <= T::zero() {
        return Ok(result(gamma, init.sup.value, init.sup.lambda, x, 0, true, trace, ridged, true));
    }
    if gamma == T::one() {
        let mut r = result(gamma, init.sup.value, init.sup.lambda, x, 0, true, trace, ridged, false);
        r.lower_bound = r.a_star;
        return Ok(r);
    }

    let scale = init.surrogate().max(T::one());
    let mu_floor = T::tol(1e-7) * scale;
    let mut mu = if smooth { T::lit(0.05) * scale } else { T::zero() };
    let (a_min, a_max) = (T::lit(1e-12), T::lit(1e12));
    let tol = T::tol(opts.tol);
    let gap_tol = T::tol(opts.gap_tol);
    let pg_tol = T::tol(1e-13);
    // the lower bound is clipped at zero, so only positive targets can settle
    let target = opts.target.filter(|&c| c > 0.0).map(T::lit);

    let mut best_val = init.sup.value;
    let mut best_rho = x.clone();
    let mut best_lambda = init.sup.lambda.clone();
    let mut lower = T::zero();
    let mut iterations = 0;
    let mut closed = false;
    let mut g = vec![T::zero(); n];
    let mut raw = vec![T::zero(); n];
    let mut y = vec![T::zero(); n];
    let mut dir = vec![T::zero(); n];
    let mut trial = vec![T::zero(); n];

    'stages: loop {
        let mut p = probe(q, t, &x, spec, mu)?;
        lower = lower.max(p.lower_bound(&x, layout, gamma).max(T::zero()).sqrt());
        p.root_grad_into(&mut g);
        let mut history = std::collections::VecDeque::from([p.root()]);
        let mut stage_best = p.root();
        let mut stale = 0;

        for (r, (&xi, &gi)) in raw.iter_mut().zip(x.iter().zip(&g)) {
            *r = xi - gi;
        }
        project_into(&raw, layout, gamma, &mut y);
        let mut alpha = {
            let m = y.iter().zip(&x).fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()));
            if m > T::zero() { (T::one() / m).max(a_min).min(a_max) } else { T::one() }
        };

        while iterations < opts.max_iter {
            if best_val - lower <= gap_tol {
                closed = true;
                break 'stages;
            }
            if let Some(c) = target {
                if best_val < c || lower >= c {
                    closed = true;
                    break 'stages;
                }
            }
            for (r, (&xi, &gi)) in raw.iter_mut().zip(x.iter().zip(&g)) {
                *r = xi - alpha * gi;
            }
            project_into(&raw, layout, gamma, &mut y);
            for ((d, &a), &b) in dir.iter_mut().zip(&y).zip(&x) {
                *d = a - b;
            }
            let gtd = dot(&g, &dir);
            if !(gtd < T::zero()) || inf_norm(&dir) <= pg_tol {
                break;
            }
            iterations += 1;
            let f_ref = history.iter().copied().fold(T::neg_infinity(), T::max);
            let mut lam = T::one();
            let accepted = loop {
                for ((z, &xi), &di) in trial.iter_mut().zip(&x).zip(&dir) {
                    *z = xi + lam * di;
                }
                let cand = probe(q, t, &trial, spec, mu)?;
                ridged |= cand.eval.ridged;
                if cand.eval.sup.value <= T::zero() {
                    return Ok(result(gamma, cand.eval.sup.value, cand.eval.sup.lambda, trial, iterations, true, trace, ridged, true));
                }
                if cand.root() <= f_ref + T::lit(1e-4) * lam * gtd {
                    break Some(cand);
                }
                lam = lam * T::lit(0.5);
                if lam < T::lit(1e-12) {
                    break None;
                }
            };
            let Some(cand) = accepted else { break };

            let old_g = g.clone();
            cand.root_grad_into(&mut g);
            let (mut sts, mut sty) = (T::zero(), T::zero());
            for i in 0..n {
                let si = trial[i] - x[i];
                sts = sts + si * si;
                sty = sty + si * (g[i] - old_g[i]);
            }
            alpha = if sty > T::zero() { (sts / sty).max(a_min).min(a_max) } else { a_max };
            x.copy_from_slice(&trial);
            p = cand;
            lower = lower.max(p.lower_bound(&x, layout, gamma).max(T::zero()).sqrt());

            if p.eval.sup.value < best_val {
                best_val = p.eval.sup.value;
                best_rho.copy_from_slice(&x);
                best_lambda.clone_from(&p.eval.sup.lambda);
            }
            if opts.record_trace {
                trace.push(best_val * best_val);
            }
            history.push_back(p.root());
            if history.len() > LINE_SEARCH_MEMORY {
                history.pop_front();
            }
            if p.root() < stage_best - tol * stage_best {
                stage_best = p.root();
                stale = 0;
            } else {
                stale += 1;
                if stale >= SPECTRAL_PATIENCE {
                    break;
                }
            }
        }
        if !smooth || mu <= mu_floor || iterations >= opts.max_iter {
            break;
        }
        mu = (mu * T::lit(0.1)).max(mu_floor);
    }
    let converged = closed || (iterations < opts.max_iter && best_val - lower <= gap_tol);
    let mut r = result(gamma, best_val, best_lambda, best_rho, iterations, converged, trace, ridged, false);
    r.lower_bound = lower.min(r.a_star.max(T::zero()));
    Ok(r)
}

#[allow(clippy::too_many_arguments)]
fn result<T: Scalar>(
    gamma: T,
    a: T,
    lambda: Vec<T>,
    rho: Vec<T>,
    iterations: usize,
    converged: bool,
    trace: Vec<T>,
    ridged: bool,
    early_exit: bool,
) -> GameResult<T> {
    let b = a.max(T::zero());
    GameResult {
        a_star: a,
        b_star: b * b,
        lambda_star: lambda,
        rho_star: ProbVector::new_unchecked(rho, gamma),
        iterations,
        converged,
        trace,
        ridged,
        early_exit,
        lower_bound: T::zero(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MatchedStudy, ScoreScheme, StrataLayout};
    use approx::assert_relative_eq;

    #[test]
    fn coherent_sup_examples() {
        let id = SymMatrix::<f64>::identity(2);
        let r = coherent_sup(&[3.0, 4.0], &id).unwrap();
        assert_relative_eq!(r.value, 5.0, epsilon = 1e-12);
        assert_relative_eq!(r.lambda[1] / r.lambda[0], 4.0 / 3.0, epsilon = 1e-12);
        let r = coherent_sup(&[3.0, -4.0], &id).unwrap();
        assert_relative_eq!(r.value, 3.0, epsilon = 1e-12);
        assert_eq!(r.lambda, vec![1.0, 0.0]);
        let s = SymMatrix::from_rows(&[vec![4.0]]).unwrap();
        assert_relative_eq!(coherent_sup(&[3.0], &s).unwrap().value, 1.5);
    }

    #[test]
    fn non_positive_sup_is_signed() {
        let s = SymMatrix::from_rows(&[vec![4.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let r = coherent_sup(&[-1.0, -3.0], &s).unwrap();
        assert_relative_eq!(r.value, -0.5);
        assert_eq!(r.lambda, vec![1.0, 0.0]);
    }

    #[test]
    fn singular_sigma_is_error() {
        let s = SymMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(matches!(coherent_sup(&[1.0, 1.0], &s), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn finite_set_examples() {
        let s = SymMatrix::from_rows(&[vec![1.0, 0.5], vec![0.5, 4.0]]).unwrap();
        let d = [1.0, 3.0];
        let r = finite_sup(&d, &s, &LambdaSpec::<f64>::per_outcome(2).into_set()).unwrap();
        assert_relative_eq!(r.value, 1.5);
        let r = finite_sup(&d, &s, &LambdaSpec::<f64>::equal_weight(2).into_set()).unwrap();
        assert_relative_eq!(r.value, 4.0 / 6f64.sqrt());
        assert!(r.value <= coherent_sup(&d, &s).unwrap().value + 1e-12);
        let u = unconstrained_sup(&d, &s).unwrap();
        assert!(u.value >= coherent_sup(&d, &s).unwrap().value - 1e-12);
    }

    impl<T: Scalar> LambdaSpec<T> {
        fn into_set(self) -> Vec<Vec<T>> {
            match self {
                LambdaSpec::Finite(v) => v,
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn lambda_validation() {
        assert!(LambdaSpec::<f64>::Finite(vec![]).validate(2).is_err());
        assert!(LambdaSpec::Finite(vec![vec![0.0, 0.0]]).validate(2).is_err());
        assert!(LambdaSpec::Finite(vec![vec![1.0]]).validate(2).is_err());
        assert!(LambdaSpec::<f64>::Cone.contains(&[0.0, 2.0]));
        assert!(!LambdaSpec::<f64>::Cone.contains(&[0.0, 0.0]));
    }

    fn study() -> ScoreMatrix<f64> {
        let s = MatchedStudy::from_pair_differences(&[
            vec![1.2, 0.3],
            vec![0.8, -0.2],
            vec![-0.3, 0.9],
            vec![1.5, 1.1],
            vec![0.4, 0.6],
        ])
        .unwrap();
        crate::model::huber_pair_scores(&s, 2.5).unwrap()
    }

    #[test]
    fn gamma_one_is_deviate_at_uniform() {
        let q = study();
        let r = solve_worst_case(&q, 1.0, &LambdaSpec::Cone, &GameOptions::default()).unwrap();
        assert_eq!(r.iterations, 0);
        let e = evaluate(&q, &q.observed(), uniform_probs(q.layout()).as_slice(), &LambdaSpec::Cone).unwrap();
        assert_eq!(r.a_star, e.sup.value);
        assert_relative_eq!(r.b_star, r.a_star.max(0.0).powi(2));
    }

    #[test]
    fn unit_direction_subgradient_uses_one_column() {
        let q = study();
        let rho = uniform_probs::<f64>(q.layout()).into_vec();
        let g = subgradient(&q, &q.observed(), &rho, &[1.0, 0.0]).unwrap();
        let q1 = ScoreMatrix::from_parts(
            q.layout().clone(),
            q.treated_positions().to_vec(),
            &(0..q.num_units()).map(|u| vec![q.get(u, 0), 7.0 * (u as f64)]).collect::<Vec<_>>(),
            ScoreScheme::UserSupplied,
        )
        .unwrap();
        let mut t = q.observed();
        t[1] = 123.0;
        let g1 = subgradient(&q1, &t, &rho, &[1.0, 0.0]).unwrap();
        for (a, b) in g.iter().zip(&g1) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn best_trace_is_monotone_and_gamma_nesting_holds() {
        let q = study();
        let mut prev = f64::INFINITY;
        for gamma in [1.0, 1.2, 1.5, 2.0, 3.0] {
            let r = solve_worst_case(&q, gamma, &LambdaSpec::Cone, &GameOptions::default()).unwrap();
            assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
            assert!(r.b_star <= prev + 1e-6);
            assert!(r.rho_star.is_feasible_at(q.layout(), gamma));
            prev = r.b_star;
        }
    }

    #[test]
    fn single_precision_solver_runs() {
        let s = MatchedStudy::<f32>::from_pair_differences(&[vec![1.0, 0.5], vec![0.7, 0.9], vec![1.4, -0.1]]).unwrap();
        let q = crate::model::huber_pair_scores(&s, 2.5).unwrap();
        let r = solve_worst_case(&q, 1.5f32, &LambdaSpec::Cone, &GameOptions::default()).unwrap();
        assert!(r.a_star.is_finite());
        let _ = StrataLayout::pairs(1);
    }
}
