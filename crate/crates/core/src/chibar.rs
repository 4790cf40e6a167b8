//! The chi-bar-squared reference distribution for the coherent statistic.
//!
//! With `Y ~ N(0, C)` for the correlation matrix `C` of the statistic vector,
//! the limiting null law of the squared coherent deviate is that of
//! `max(0, sup_{l >= 0} l'Y / sqrt(l'Cl))^2`. It is a mixture of `chi^2_i`
//! laws whose weight `w_i` is the probability that the nonnegative QP
//! solution has exactly `i` positive components.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::game::coherent_sup;
use crate::linalg::{Cholesky, SymMatrix};
use crate::qp::solve_nonneg_qp;

/// Draws per reproducible substream.
const BATCH: usize = 4096;
/// Default Monte Carlo budget for weights.
pub const DEFAULT_DRAWS: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiBarSpec {
    c: SymMatrix<f64>,
}

impl ChiBarSpec {
    pub fn new(c: SymMatrix<f64>) -> Result<Self> {
        let k = c.dim();
        if k == 0 {
            return Err(Error::Correlation("empty matrix".into()));
        }
        for i in 0..k {
            if (c.get(i, i) - 1.0).abs() > 1e-9 {
                return Err(Error::Correlation(format!("diagonal entry {i} is {}", c.get(i, i))));
            }
            for j in 0..i {
                if !(c.get(i, j).abs() < 1.0) {
                    return Err(Error::Correlation(format!("entry ({i},{j}) = {} outside (-1, 1)", c.get(i, j))));
                }
            }
        }
        if !c.is_finite() || c.cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("correlation matrix".into()));
        }
        Ok(Self { c })
    }

    pub fn identity(k: usize) -> Self {
        Self { c: SymMatrix::identity(k) }
    }

    /// Correlation of a covariance matrix.
    pub fn from_covariance(sigma: &SymMatrix<f64>) -> Result<Self> {
        Self::new(sigma.to_correlation()?)
    }

    pub fn dim(&self) -> usize {
        self.c.dim()
    }

    pub fn correlation(&self) -> &SymMatrix<f64> {
        &self.c
    }

    fn chol(&self) -> Cholesky<f64> {
        self.c.cholesky().expect("validated positive definite")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum WeightMethod {
    Analytic,
    MonteCarlo { draws: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiBarWeights {
    /// `w_0, ..., w_K`.
    pub w: Vec<f64>,
    pub method: WeightMethod,
    /// Binomial standard errors for Monte Carlo weights.
    pub mc_se: Option<Vec<f64>>,
}

impl ChiBarWeights {
    pub fn dim(&self) -> usize {
        self.w.len() - 1
    }
}

/// Standard normal draws for batch `b` of a run seeded with `seed`.
fn batch_rng(seed: u64, b: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b as u64);
    rng
}

fn batches(n: usize) -> impl ParallelIterator<Item = (usize, usize)> {
    let count = n.div_ceil(BATCH);
    (0..count).into_par_iter().map(move |b| (b, BATCH.min(n - b * BATCH)))
}

/// `n` i.i.d. draws of the chi-bar-squared variable.
pub fn chibar_sample(spec: &ChiBarSpec, n: usize, seed: u64) -> Vec<f64> {
    let chol = spec.chol();
    let k = spec.dim();
    let parts: Vec<Vec<f64>> = batches(n)
        .map(|(b, len)| {
            let mut rng = batch_rng(seed, b);
            let mut z = vec![0.0; k];
            let mut y = vec![0.0; k];
            (0..len)
                .map(|_| {
                    z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                    chol.lower_mul_into(&z, &mut y);
                    let v = coherent_sup(&y, &spec.c).expect("validated").value.max(0.0);
                    v * v
                })
                .collect()
        })
        .collect();
    parts.concat()
}

/// Mixture weights: analytic for `K <= 3`, Monte Carlo otherwise.
pub fn chibar_weights(spec: &ChiBarSpec, n: usize, seed: u64) -> Result<ChiBarWeights> {
    if spec.dim() <= 3 {
        Ok(analytic_weights(spec))
    } else {
        monte_carlo_weights(spec, n, seed)
    }
}

/// Weights by summing, over supports `S`, the probability that the QP
/// solution is supported exactly on `S`: the product of the positive-orthant
/// probability of `N(0, C_SS^{-1})` and that of the Schur complement of
/// `C_SS`. Orthant probabilities are closed-form up to dimension three.
pub fn analytic_weights(spec: &ChiBarSpec) -> ChiBarWeights {
    let k = spec.dim();
    assert!(k <= 3, "analytic weights need K <= 3");
    let c = &spec.c;
    let mut w = vec![0.0; k + 1];
    for mask in 0u32..(1 << k) {
        let s: Vec<usize> = (0..k).filter(|&i| mask >> i & 1 == 1).collect();
        let r: Vec<usize> = (0..k).filter(|&i| mask >> i & 1 == 0).collect();
        let p_in = if s.is_empty() { 1.0 } else { orthant(&c.submatrix(&s).inverse().expect("pd")) };
        let p_out = if r.is_empty() { 1.0 } else { orthant(&schur(c, &s, &r)) };
        w[s.len()] += p_in * p_out;
    }
    ChiBarWeights { w, method: WeightMethod::Analytic, mc_se: None }
}

/// `C_RR - C_RS C_SS^{-1} C_SR`.
fn schur(c: &SymMatrix<f64>, s: &[usize], r: &[usize]) -> SymMatrix<f64> {
    let mut out = c.submatrix(r);
    if s.is_empty() {
        return out;
    }
    let inv = c.submatrix(s).inverse().expect("pd");
    for (a, &ra) in r.iter().enumerate() {
        for (b, &rb) in r.iter().enumerate().skip(a) {
            let mut v = 0.0;
            for (x, &sx) in s.iter().enumerate() {
                for (y, &sy) in s.iter().enumerate() {
                    v += c.get(ra, sx) * inv.get(x, y) * c.get(sy, rb);
                }
            }
            out.set(a, b, out.get(a, b) - v);
        }
    }
    out
}

/// `P(X > 0)` for a centered Gaussian of dimension at most three.
fn orthant(cov: &SymMatrix<f64>) -> f64 {
    use std::f64::consts::PI;
    let k = cov.dim();
    let r = |i: usize, j: usize| (cov.get(i, j) / (cov.get(i, i) * cov.get(j, j)).sqrt()).clamp(-1.0, 1.0);
    match k {
        1 => 0.5,
        2 => 0.25 + r(0, 1).asin() / (2.0 * PI),
        3 => 0.125 + (r(0, 1).asin() + r(0, 2).asin() + r(1, 2).asin()) / (4.0 * PI),
        _ => unreachable!("orthant probabilities are closed-form up to dimension three"),
    }
}

/// Weights from the support size of the QP solution over `n` draws.
pub fn monte_carlo_weights(spec: &ChiBarSpec, n: usize, seed: u64) -> Result<ChiBarWeights> {
    if n == 0 {
        return Err(Error::Invalid("Monte Carlo weights need at least one draw".into()));
    }
    let k = spec.dim();
    let chol = spec.chol();
    let counts = batches(n)
        .map(|(b, len)| {
            let mut rng = batch_rng(seed, b);
            let mut z = vec![0.0; k];
            let mut y = vec![0.0; k];
            let mut counts = vec![0u64; k + 1];
            for _ in 0..len {
                z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                chol.lower_mul_into(&z, &mut y);
                let sol = solve_nonneg_qp(&spec.c, &y);
                counts[sol.x.iter().filter(|&&v| v > 0.0).count()] += 1;
            }
            counts
        })
        .reduce(
            || vec![0u64; k + 1],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    let nf = n as f64;
    let w: Vec<f64> = counts.iter().map(|&c| c as f64 / nf).collect();
    let se = w.iter().map(|&p| (p * (1.0 - p) / nf).sqrt()).collect();
    Ok(ChiBarWeights { w, method: WeightMethod::MonteCarlo { draws: n, seed }, mc_se: Some(se) })
}

fn chi2_cdf(df: usize, c: f64) -> f64 {
    if c <= 0.0 {
        return if df == 0 { 1.0 } else { 0.0 };
    }
    if df == 0 {
        return 1.0;
    }
    ChiSquared::new(df as f64).expect("positive df").cdf(c)
}

fn chi2_sf(df: usize, c: f64) -> f64 {
    if df == 0 {
        return if c <= 0.0 { 1.0 } else { 0.0 };
    }
    if c <= 0.0 {
        return 1.0;
    }
    ChiSquared::new(df as f64).expect("positive df").sf(c)
}

/// Upper `p` quantile helper: `c` with `P(chi^2_df <= c) = p`.
pub fn chi2_quantile(df: usize, p: f64) -> f64 {
    ChiSquared::new(df as f64).expect("positive df").inverse_cdf(p)
}

/// `sum_i w_i P(chi^2_i <= c)`, with `chi^2_0` a point mass at zero.
pub fn chibar_cdf(c: f64, w: &ChiBarWeights) -> f64 {
    if c < 0.0 {
        return 0.0;
    }
    w.w.iter().enumerate().map(|(i, &wi)| wi * chi2_cdf(i, c)).sum::<f64>().clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantile {
    pub value: f64,
    /// `p` fell at or below the point mass at zero.
    pub at_zero_mass: bool,
}

/// Generalized inverse of [`chibar_cdf`] by bisection.
pub fn chibar_quantile(p: f64, w: &ChiBarWeights) -> Result<Quantile> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Invalid(format!("quantile level must lie in (0, 1), got {p}")));
    }
    if p <= w.w[0] {
        return Ok(Quantile { value: 0.0, at_zero_mass: true });
    }
    let value = bisect_increasing(|c| chibar_cdf(c, w), p);
    Ok(Quantile { value, at_zero_mass: false })
}

/// Smallest `c >= 0` with `f(c) >= p` for a non-decreasing `f`, to 1e-12.
fn bisect_increasing(f: impl Fn(f64) -> f64, p: f64) -> f64 {
    let mut hi = 1.0;
    while f(hi) < p {
        hi *= 2.0;
        if hi > 1e6 {
            return f64::INFINITY;
        }
    }
    let mut lo = 0.0;
    while hi - lo > 1e-12 * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if f(mid) >= p {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// `1/2 {P(chi^2_{K-1} >= c) + P(chi^2_K >= c)}`, an upper bound on the
/// chi-bar tail for every correlation. At `c <= 0` both tails are taken as one.
pub fn perlman_pvalue(c: f64, k: usize) -> f64 {
    assert!(k >= 1, "K must be positive");
    if c <= 0.0 {
        return 1.0;
    }
    0.5 * (chi2_sf(k - 1, c) + chi2_sf(k, c))
}

/// `c` with `perlman_pvalue(c, K) = alpha`.
pub fn perlman_quantile(alpha: f64, k: usize) -> f64 {
    bisect_increasing(|c| 1.0 - perlman_pvalue(c, k), 1.0 - alpha)
}
