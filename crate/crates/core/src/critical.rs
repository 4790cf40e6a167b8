//! Worst-case chi-bar critical values.
//!
//! The correlation of the statistic vector moves with the hidden-bias
//! probabilities. Pairwise correlation bounds over the feasible polytope are
//! found numerically, and the `1 - alpha` chi-bar quantile is then maximized
//! over correlation matrices inside the resulting box.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chibar::{analytic_weights, chibar_quantile, monte_carlo_weights, perlman_quantile, ChiBarSpec};
use crate::error::{Error, Result};
use crate::feasible::{compute_moments, project_into, random_vertex, uniform_probs};
use crate::linalg::SymMatrix;
use crate::model::ScoreMatrix;

/// Largest admissible magnitude of a bound after widening.
const CORR_LIMIT: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationBox {
    pub gamma: f64,
    pub lower: SymMatrix<f64>,
    pub upper: SymMatrix<f64>,
    /// Correlation at the uniform probabilities.
    pub center: SymMatrix<f64>,
}

impl CorrelationBox {
    pub fn dim(&self) -> usize {
        self.lower.dim()
    }

    /// A box holding a single correlation matrix.
    pub fn degenerate(c: SymMatrix<f64>) -> Self {
        Self { gamma: 1.0, lower: c.clone(), upper: c.clone(), center: c }
    }

    pub fn contains(&self, c: &SymMatrix<f64>, tol: f64) -> bool {
        let k = self.dim();
        (0..k).all(|i| {
            (0..i).all(|j| c.get(i, j) >= self.lower.get(i, j) - tol && c.get(i, j) <= self.upper.get(i, j) + tol)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationOptions {
    /// Random vertex starts in addition to the uniform start.
    pub vertex_starts: usize,
    pub max_iter: usize,
    /// Absolute widening of the optimized interval when Gamma > 1.
    pub widen: f64,
    pub seed: u64,
}

impl Default for CorrelationOptions {
    fn default() -> Self {
        Self { vertex_starts: 4, max_iter: 200, widen: 0.01, seed: 0 }
    }
}

/// Correlation of outcomes `k`, `l` at `rho`, with its gradient in `rho`.
fn corr_and_grad(q: &ScoreMatrix<f64>, rho: &[f64], k: usize, l: usize, grad: Option<&mut [f64]>) -> Result<f64> {
    let layout = q.layout();
    let (mut skk, mut sll, mut skl) = (0.0, 0.0, 0.0);
    for i in 0..layout.num_strata() {
        let (mut mk, mut ml) = (0.0, 0.0);
        for u in layout.range(i) {
            let r = q.row(u);
            mk += r[k] * rho[u];
            ml += r[l] * rho[u];
            skk += r[k] * r[k] * rho[u];
            sll += r[l] * r[l] * rho[u];
            skl += r[k] * r[l] * rho[u];
        }
        skk -= mk * mk;
        sll -= ml * ml;
        skl -= mk * ml;
    }
    if !(skk > 0.0) {
        return Err(Error::DegenerateVariance { outcome: k });
    }
    if !(sll > 0.0) {
        return Err(Error::DegenerateVariance { outcome: l });
    }
    let s = (skk * sll).sqrt();
    let corr = skl / s;
    if let Some(g) = grad {
        for i in 0..layout.num_strata() {
            let r = layout.range(i);
            let mk: f64 = r.clone().map(|u| q.get(u, k) * rho[u]).sum();
            let ml: f64 = r.clone().map(|u| q.get(u, l) * rho[u]).sum();
            for u in r {
                let (a, b) = (q.get(u, k), q.get(u, l));
                let dkk = a * a - 2.0 * a * mk;
                let dll = b * b - 2.0 * b * ml;
                let dkl = a * b - a * ml - mk * b;
                g[u] = dkl / s - 0.5 * corr * (dkk / skk + dll / sll);
            }
        }
    }
    Ok(corr)
}

/// Spectral projected gradient ascent of `sign * corr` from `start`; returns
/// the best value of `corr`.
fn optimize_corr(
    q: &ScoreMatrix<f64>,
    gamma: f64,
    k: usize,
    l: usize,
    sign: f64,
    start: Vec<f64>,
    max_iter: usize,
) -> Result<f64> {
    const MEMORY: usize = 8;
    const PATIENCE: usize = 5;
    let layout = q.layout();
    let n = start.len();
    let mut rho = start;
    let mut grad = vec![0.0; n];
    let mut new_grad = vec![0.0; n];
    let mut raw = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut dir = vec![0.0; n];
    let mut cand = vec![0.0; n];
    let mut val = sign * corr_and_grad(q, &rho, k, l, Some(&mut grad))?;
    grad.iter_mut().for_each(|g| *g *= sign);
    let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    if gmax == 0.0 {
        return Ok(sign * val);
    }
    let mut alpha = (1.0 / gmax).clamp(1e-12, 1e12);
    let mut history = std::collections::VecDeque::from([val]);
    let (mut best, mut stale) = (val, 0);
    for _ in 0..max_iter {
        for ((r, &p), &g) in raw.iter_mut().zip(&rho).zip(&grad) {
            *r = p + alpha * g;
        }
        project_into(&raw, layout, gamma, &mut y);
        for ((d, &a), &b) in dir.iter_mut().zip(&y).zip(&rho) {
            *d = a - b;
        }
        let gtd: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        if !(gtd > 1e-15) {
            break;
        }
        let f_ref = history.iter().copied().fold(f64::INFINITY, f64::min);
        let mut lam = 1.0;
        let accepted = loop {
            for ((c, &p), &d) in cand.iter_mut().zip(&rho).zip(&dir) {
                *c = p + lam * d;
            }
            if let Ok(v) = corr_and_grad(q, &cand, k, l, Some(&mut new_grad)) {
                let v = sign * v;
                if v >= f_ref + 1e-4 * lam * gtd {
                    break Some(v);
                }
            }
            lam *= 0.5;
            if lam < 1e-12 {
                break None;
            }
        };
        let Some(v) = accepted else { break };
        new_grad.iter_mut().for_each(|g| *g *= sign);
        let (mut sts, mut sty) = (0.0, 0.0);
        for i in 0..n {
            let si = cand[i] - rho[i];
            sts += si * si;
            sty += si * (new_grad[i] - grad[i]);
        }
        // ascent: curvature of the negated objective
        alpha = if sty < 0.0 { (-sts / sty).clamp(1e-12, 1e12) } else { 1e12 };
        std::mem::swap(&mut rho, &mut cand);
        std::mem::swap(&mut grad, &mut new_grad);
        val = v;
        history.push_back(val);
        if history.len() > MEMORY {
            history.pop_front();
        }
        // far below the widening margin of the box
        if val > best + 1e-7 {
            best = val;
            stale = 0;
        } else {
            stale += 1;
            if stale >= PATIENCE {
                break;
            }
        }
    }
    Ok(sign * best.max(val))
}

/// Bounds on the correlation of outcomes `k` and `l` over the polytope at `gamma`.
pub fn correlation_bounds(
    q: &ScoreMatrix<f64>,
    gamma: f64,
    k: usize,
    l: usize,
    opts: &CorrelationOptions,
) -> Result<(f64, f64)> {
    if !(gamma >= 1.0) {
        return Err(Error::GammaBelowOne(gamma));
    }
    let kk = q.num_outcomes();
    if k >= kk || l >= kk {
        return Err(Error::Dimension(format!("outcome index out of range for K = {kk}")));
    }
    let (lo, hi) = raw_bounds(q, gamma, k, l, opts)?;
    if gamma == 1.0 {
        return Ok((lo, hi));
    }
    Ok(((lo - opts.widen).max(-CORR_LIMIT), (hi + opts.widen).min(CORR_LIMIT)))
}

/// Unwidened optimized interval.
pub fn raw_bounds(q: &ScoreMatrix<f64>, gamma: f64, k: usize, l: usize, opts: &CorrelationOptions) -> Result<(f64, f64)> {
    let uniform = uniform_probs::<f64>(q.layout()).into_vec();
    let center = corr_and_grad(q, &uniform, k, l, None)?;
    if gamma == 1.0 || k == l {
        return Ok((center, center));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ ((k as u64) << 32 | l as u64));
    let mut starts = vec![uniform];
    for _ in 0..opts.vertex_starts {
        starts.push(random_vertex(q.layout(), gamma, &mut rng).into_vec());
    }
    let (mut lo, mut hi) = (center, center);
    for s in starts {
        hi = hi.max(optimize_corr(q, gamma, k, l, 1.0, s.clone(), opts.max_iter)?);
        lo = lo.min(optimize_corr(q, gamma, k, l, -1.0, s, opts.max_iter)?);
    }
    Ok((lo, hi))
}

/// Bounds for every pair of outcomes.
pub fn correlation_box(q: &ScoreMatrix<f64>, gamma: f64, opts: &CorrelationOptions) -> Result<CorrelationBox> {
    let k = q.num_outcomes();
    let uniform = uniform_probs::<f64>(q.layout()).into_vec();
    let center = compute_moments(q, &uniform).sigma.to_correlation()?;
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (0..i).map(move |j| (i, j))).collect();
    let bounds: Vec<(f64, f64)> = pairs
        .par_iter()
        .map(|&(i, j)| correlation_bounds(q, gamma, i, j, opts))
        .collect::<Result<_>>()?;
    let mut lower = SymMatrix::identity(k);
    let mut upper = SymMatrix::identity(k);
    for (&(i, j), &(lo, hi)) in pairs.iter().zip(&bounds) {
        lower.set(i, j, lo);
        upper.set(i, j, hi);
    }
    Ok(CorrelationBox { gamma, lower, upper, center })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileOptions {
    /// Monte Carlo draws for the final evaluation when `K >= 4`.
    pub draws: usize,
    /// Monte Carlo draws during the search when `K >= 4`.
    pub search_draws: usize,
    pub seed: u64,
    /// Coordinate sweeps per start.
    pub max_sweeps: usize,
    /// Central finite-difference half-width.
    pub fd_step: f64,
}

impl Default for QuantileOptions {
    fn default() -> Self {
        Self { draws: 200_000, search_draws: 20_000, seed: 0, max_sweeps: 30, fd_step: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantileMethod {
    /// One outcome: the half-normal quantile.
    Univariate,
    /// Two outcomes: the quantile at the lower correlation bound.
    LowerCorner,
    /// Coordinate ascent with analytic weights.
    AnalyticSearch,
    /// Coordinate ascent with Monte Carlo weights and common random numbers.
    MonteCarloSearch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCaseQuantile {
    /// Squared scale: the `1 - alpha` quantile of the chi-bar law.
    pub quantile: f64,
    /// `sqrt(quantile)`, compared against the deviate.
    pub critical_value: f64,
    pub c_worst: SymMatrix<f64>,
    pub method: QuantileMethod,
    /// The search exceeded the Perlman bound and was capped to it.
    pub perlman_capped: bool,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 0.5) {
        return Err(Error::AlphaOutOfRange(alpha));
    }
    Ok(())
}

/// Nearest valid correlation: eigenvalues clipped at `1e-6`, then rescaled to unit diagonal.
pub fn repair_correlation(c: &SymMatrix<f64>) -> SymMatrix<f64> {
    let clipped = c.clip_eigenvalues(1e-6);
    let k = clipped.dim();
    let mut out = SymMatrix::identity(k);
    for i in 0..k {
        for j in 0..i {
            let v = clipped.get(i, j) / (clipped.get(i, i) * clipped.get(j, j)).sqrt();
            out.set(i, j, v.clamp(-CORR_LIMIT, CORR_LIMIT));
        }
    }
    out
}

/// `1 - alpha` quantile of the chi-bar law for correlation `c`.
pub fn quantile_at(c: &SymMatrix<f64>, alpha: f64, draws: usize, seed: u64) -> Result<f64> {
    let spec = match ChiBarSpec::new(c.clone()) {
        Ok(s) => s,
        Err(_) => ChiBarSpec::new(repair_correlation(c))?,
    };
    let w = if spec.dim() <= 3 { analytic_weights(&spec) } else { monte_carlo_weights(&spec, draws, seed)? };
    Ok(chibar_quantile(1.0 - alpha, &w)?.value)
}

/// Maximizes the chi-bar `1 - alpha` quantile over correlation matrices in the box.
pub fn worst_case_quantile(bx: &CorrelationBox, alpha: f64, opts: &QuantileOptions) -> Result<WorstCaseQuantile> {
    check_alpha(alpha)?;
    let k = bx.dim();
    let perlman = perlman_quantile(alpha, k);
    let finish = |quantile: f64, c_worst: SymMatrix<f64>, method| {
        let capped = quantile > perlman;
        let quantile = quantile.min(perlman);
        WorstCaseQuantile { quantile, critical_value: quantile.sqrt(), c_worst, method, perlman_capped: capped }
    };
    match k {
        1 => {
            let c = SymMatrix::identity(1);
            let q = quantile_at(&c, alpha, 0, 0)?;
            return Ok(finish(q, c, QuantileMethod::Univariate));
        }
        2 => {
            let c = repair_correlation(&bx.lower);
            let q = quantile_at(&c, alpha, 0, 0)?;
            return Ok(finish(q, c, QuantileMethod::LowerCorner));
        }
        _ => {}
    }

    let (search_draws, method) =
        if k <= 3 { (0, QuantileMethod::AnalyticSearch) } else { (opts.search_draws, QuantileMethod::MonteCarloSearch) };
    let eval = |c: &SymMatrix<f64>| quantile_at(&repair_correlation(c), alpha, search_draws, opts.seed);
    let mut mid = bx.lower.clone();
    for i in 0..k {
        for j in 0..i {
            mid.set(i, j, 0.5 * (bx.lower.get(i, j) + bx.upper.get(i, j)));
        }
    }
    let starts = [bx.lower.clone(), bx.upper.clone(), mid];
    let results: Vec<(f64, SymMatrix<f64>)> = starts
        .into_par_iter()
        .map(|s| coordinate_ascent(bx, s, &eval, opts))
        .collect::<Result<_>>()?;
    let (mut best_q, mut best_c) = results
        .into_iter()
        .fold((f64::NEG_INFINITY, SymMatrix::identity(k)), |acc, r| if r.0 > acc.0 { r } else { acc });
    best_c = repair_correlation(&best_c);
    if k > 3 {
        best_q = quantile_at(&best_c, alpha, opts.draws, opts.seed)?;
    }
    Ok(finish(best_q, best_c, method))
}

fn coordinate_ascent(
    bx: &CorrelationBox,
    start: SymMatrix<f64>,
    eval: &(impl Fn(&SymMatrix<f64>) -> Result<f64> + Sync),
    opts: &QuantileOptions,
) -> Result<(f64, SymMatrix<f64>)> {
    let k = bx.dim();
    let coords: Vec<(usize, usize)> = (0..k).flat_map(|i| (0..i).map(move |j| (i, j))).collect();
    let width = |(i, j): (usize, usize)| bx.upper.get(i, j) - bx.lower.get(i, j);
    let max_width = coords.iter().map(|&c| width(c)).fold(0.0, f64::max);
    if max_width == 0.0 {
        return Ok((eval(&start)?, start));
    }
    let mut c = start;
    let mut val = eval(&c)?;
    let mut step = 0.25 * max_width;
    for _ in 0..opts.max_sweeps {
        let mut moved = false;
        for &(i, j) in &coords {
            let (lo, hi) = (bx.lower.get(i, j), bx.upper.get(i, j));
            if hi - lo == 0.0 {
                continue;
            }
            let x = c.get(i, j);
            let h = opts.fd_step.min(0.5 * (hi - lo));
            let probe = |v: f64| -> Result<f64> {
                let mut m = c.clone();
                m.set(i, j, v.clamp(lo, hi));
                eval(&m)
            };
            let slope = probe(x + h)? - probe(x - h)?;
            let dir = if slope > 0.0 { 1.0 } else if slope < 0.0 { -1.0 } else { 0.0 };
            for d in [dir, -dir] {
                if d == 0.0 {
                    continue;
                }
                let target = (x + d * step).clamp(lo, hi);
                if target == x {
                    continue;
                }
                let v = probe(target)?;
                if v > val {
                    val = v;
                    c.set(i, j, target);
                    moved = true;
                    break;
                }
            }
        }
        if !moved {
            step *= 0.5;
            if step < 1e-3 {
                break;
            }
        }
    }
    Ok((val, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{huber_pair_scores, MatchedStudy};
    use approx::assert_relative_eq;

    fn scores() -> ScoreMatrix<f64> {
        let s = MatchedStudy::from_pair_differences(&[
            vec![1.2, 0.3, 0.5],
            vec![0.8, -0.2, 1.1],
            vec![-0.3, 0.9, 0.2],
            vec![1.5, 1.1, -0.4],
            vec![0.4, 0.6, 0.9],
            vec![0.1, -0.7, 0.3],
        ])
        .unwrap();
        huber_pair_scores(&s, 2.5).unwrap()
    }

    #[test]
    fn gamma_one_collapses() {
        let q = scores();
        let (lo, hi) = correlation_bounds(&q, 1.0, 0, 1, &CorrelationOptions::default()).unwrap();
        assert_eq!(lo, hi);
        let bx = correlation_box(&q, 1.0, &CorrelationOptions::default()).unwrap();
        assert_relative_eq!(bx.lower.get(1, 0), lo);
    }

    #[test]
    fn bounds_bracket_center_and_widen() {
        let q = scores();
        let opts = CorrelationOptions::default();
        let (rlo, rhi) = raw_bounds(&q, 2.0, 0, 1, &opts).unwrap();
        let (lo, hi) = correlation_bounds(&q, 2.0, 0, 1, &opts).unwrap();
        assert!(lo <= rlo && hi >= rhi);
        assert_relative_eq!(rlo - lo, 0.01, epsilon = 1e-12);
        let bx = correlation_box(&q, 2.0, &opts).unwrap();
        assert!(bx.contains(&bx.center, 0.0));
    }

    #[test]
    fn analytic_gradient_matches_differences() {
        let q = scores();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rho = crate::feasible::random_probs(q.layout(), 2.0, &mut rng).into_vec();
        let mut g = vec![0.0; rho.len()];
        corr_and_grad(&q, &rho, 0, 2, Some(&mut g)).unwrap();
        let h = 1e-6;
        for u in 0..rho.len() {
            let mut a = rho.clone();
            let mut b = rho.clone();
            a[u] += h;
            b[u] -= h;
            let fd = (corr_and_grad(&q, &a, 0, 2, None).unwrap() - corr_and_grad(&q, &b, 0, 2, None).unwrap()) / (2.0 * h);
            assert!((fd - g[u]).abs() < 1e-6 * (1.0 + g[u].abs()));
        }
    }

    #[test]
    fn k1_and_k2_quantiles() {
        let bx = CorrelationBox::degenerate(SymMatrix::identity(1));
        let r = worst_case_quantile(&bx, 0.05, &QuantileOptions::default()).unwrap();
        assert_relative_eq!(r.critical_value, 1.6448536269514722, epsilon = 1e-7);
        let mut lower = SymMatrix::identity(2);
        lower.set(0, 1, -0.4);
        let mut upper = SymMatrix::identity(2);
        upper.set(0, 1, 0.3);
        let bx = CorrelationBox { gamma: 2.0, lower: lower.clone(), upper, center: SymMatrix::identity(2) };
        let r = worst_case_quantile(&bx, 0.05, &QuantileOptions::default()).unwrap();
        assert_relative_eq!(r.quantile, quantile_at(&lower, 0.05, 0, 0).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn alpha_is_validated() {
        let bx = CorrelationBox::degenerate(SymMatrix::identity(2));
        assert!(worst_case_quantile(&bx, 0.6, &QuantileOptions::default()).is_err());
        assert!(worst_case_quantile(&bx, 0.0, &QuantileOptions::default()).is_err());
    }

    #[test]
    fn k3_search_dominates_probes() {
        let mut lower = SymMatrix::identity(3);
        let mut upper = SymMatrix::identity(3);
        for (i, j, lo, hi) in [(1, 0, -0.2, 0.4), (2, 0, 0.1, 0.5), (2, 1, -0.5, 0.0)] {
            lower.set(i, j, lo);
            upper.set(i, j, hi);
        }
        let bx = CorrelationBox { gamma: 2.0, lower: lower.clone(), upper: upper.clone(), center: lower.clone() };
        let r = worst_case_quantile(&bx, 0.05, &QuantileOptions::default()).unwrap();
        assert!(bx.contains(&r.c_worst, 1e-6));
        for mask in 0..8 {
            let mut c = SymMatrix::identity(3);
            for (b, (i, j)) in [(1, 0), (2, 0), (2, 1)].into_iter().enumerate() {
                c.set(i, j, if mask >> b & 1 == 1 { upper.get(i, j) } else { lower.get(i, j) });
            }
            assert!(r.quantile >= quantile_at(&c, 0.05, 0, 0).unwrap() - 1e-9);
        }
        assert!(r.quantile <= perlman_quantile(0.05, 3) + 1e-12);
    }
}
