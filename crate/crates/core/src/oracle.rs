//! Exact ground truth on small instances by enumerating every assignment.
//!
//! Under the sensitivity model with hidden confounder `u` in the unit cube,
//! `P(Z = z) = exp(gamma z'u) / sum_{b in Omega} exp(gamma b'u)` with
//! `gamma = log Gamma`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feasible::{compute_moments, ProbVector};
use crate::game::coherent_sup;
use crate::linalg::dot;
use crate::model::{ScoreMatrix, StrataLayout};

pub const MAX_ASSIGNMENTS: usize = 1_000_000;
pub const MAX_CUBE_UNITS: usize = 16;

/// All assignments with one treated unit per stratum, in mixed-radix order
/// (last stratum fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentSpace {
    layout: StrataLayout,
    size: usize,
}

impl AssignmentSpace {
    pub fn new(layout: &StrataLayout) -> Result<Self> {
        let mut size: usize = 1;
        for &n in layout.sizes() {
            size = size.checked_mul(n).filter(|&s| s <= MAX_ASSIGNMENTS).ok_or(Error::TooLarge {
                what: "assignments",
                value: usize::MAX,
                limit: MAX_ASSIGNMENTS,
            })?;
        }
        Ok(Self { layout: layout.clone(), size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn layout(&self) -> &StrataLayout {
        &self.layout
    }

    /// Absolute treated-unit indices of assignment `index`.
    pub fn assignment(&self, mut index: usize) -> Vec<usize> {
        let s = self.layout.num_strata();
        let mut out = vec![0; s];
        for i in (0..s).rev() {
            let n = self.layout.size(i);
            out[i] = self.layout.range(i).start + index % n;
            index /= n;
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = Vec<usize>> + '_ {
        (0..self.size).map(|i| self.assignment(i))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfounderVector {
    u: Vec<f64>,
}

impl ConfounderVector {
    pub fn new(u: Vec<f64>) -> Result<Self> {
        if let Some(i) = u.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid(format!("u[{i}] = {} outside [0, 1]", u[i])));
        }
        Ok(Self { u })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.u
    }
}

/// A probability for every assignment of a space.
#[derive(Debug, Clone)]
pub struct AssignmentDist {
    pub space: AssignmentSpace,
    pub probs: Vec<f64>,
    pub gamma: f64,
}

/// `P(Z = z)` proportional to `exp(gamma z'u)`, normalized by log-sum-exp.
pub fn biased_probs(space: &AssignmentSpace, u: &ConfounderVector, gamma: f64) -> Result<AssignmentDist> {
    if !(gamma >= 1.0) {
        return Err(Error::GammaBelowOne(gamma));
    }
    if u.u.len() != space.layout.num_units() {
        return Err(Error::Dimension(format!("u has {} entries for {} units", u.u.len(), space.layout.num_units())));
    }
    let g = gamma.ln();
    let logw: Vec<f64> = space.iter().map(|z| g * z.iter().map(|&j| u.u[j]).sum::<f64>()).collect();
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logw.iter().map(|l| (l - max).exp()).sum();
    let probs = logw.iter().map(|l| (l - max).exp() / total).collect();
    Ok(AssignmentDist { space: space.clone(), probs, gamma })
}

/// Randomization distribution (uniform over assignments).
pub fn uniform_dist(space: &AssignmentSpace) -> AssignmentDist {
    let p = 1.0 / space.size as f64;
    AssignmentDist { space: space.clone(), probs: vec![p; space.size], gamma: 1.0 }
}

/// Marginal treatment probability of every unit.
pub fn unit_probs_from_assignment_dist(dist: &AssignmentDist) -> ProbVector<f64> {
    let mut rho = vec![0.0; dist.space.layout.num_units()];
    for (z, &p) in dist.space.iter().zip(&dist.probs) {
        for j in z {
            rho[j] += p;
        }
    }
    ProbVector::new_unchecked(rho, dist.gamma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Statistic {
    /// Coherent deviate standardized by the moments at the distribution's
    /// marginal probabilities (signed).
    CoherentA,
    Linear { lambda: Vec<f64> },
    PerOutcome { k: usize },
}

/// Statistic values for every assignment, and at the observed assignment.
fn statistic_values(q: &ScoreMatrix<f64>, space: &AssignmentSpace, rho: &[f64], stat: &Statistic) -> Result<(Vec<f64>, f64)> {
    let kk = q.num_outcomes();
    let f: Box<dyn Fn(&[f64]) -> Result<f64> + Sync> = match stat {
        Statistic::CoherentA => {
            let m = compute_moments(q, rho);
            Box::new(move |t: &[f64]| {
                let d: Vec<f64> = t.iter().zip(&m.mu).map(|(a, b)| a - b).collect();
                Ok(coherent_sup(&d, &m.sigma)?.value)
            })
        }
        Statistic::Linear { lambda } => {
            if lambda.len() != kk {
                return Err(Error::Lambda(format!("direction of length {} for K = {kk}", lambda.len())));
            }
            let l = lambda.clone();
            Box::new(move |t: &[f64]| Ok(dot(&l, t)))
        }
        Statistic::PerOutcome { k } => {
            if *k >= kk {
                return Err(Error::Dimension(format!("outcome {k} out of range for K = {kk}")));
            }
            let k = *k;
            Box::new(move |t: &[f64]| Ok(t[k]))
        }
    };
    let values = (0..space.size).into_par_iter().map(|i| f(&q.statistic_at(&space.assignment(i)))).collect::<Result<Vec<_>>>()?;
    let observed = f(&q.observed())?;
    Ok((values, observed))
}

/// Exact distribution as merged, sorted atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactDistribution {
    pub values: Vec<f64>,
    pub probs: Vec<f64>,
    /// Statistic at the observed assignment.
    pub observed: f64,
}

impl ExactDistribution {
    fn from_atoms(values: &[f64], probs: &[f64], observed: f64) -> Self {
        let mut idx: Vec<usize> = (0..values.len()).collect();
        idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
        let mut v: Vec<f64> = Vec::new();
        let mut p: Vec<f64> = Vec::new();
        for i in idx {
            match v.last() {
                Some(&last) if (values[i] - last).abs() <= 1e-12 * (1.0 + last.abs()) => {
                    *p.last_mut().unwrap() += probs[i];
                }
                _ => {
                    v.push(values[i]);
                    p.push(probs[i]);
                }
            }
        }
        Self { values: v, probs: p, observed }
    }

    pub fn total_mass(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// `P(S <= x)`.
    pub fn cdf(&self, x: f64) -> f64 {
        self.values.iter().zip(&self.probs).filter(|(v, _)| **v <= x + 1e-12 * (1.0 + x.abs())).map(|(_, p)| p).sum()
    }

    /// `P(S >= x)`.
    pub fn upper_tail(&self, x: f64) -> f64 {
        self.values.iter().zip(&self.probs).filter(|(v, _)| **v >= x - 1e-12 * (1.0 + x.abs())).map(|(_, p)| p).sum()
    }

    /// Observed-value p-value `P(S >= s_obs)`.
    pub fn pvalue(&self) -> f64 {
        self.upper_tail(self.observed)
    }

    /// Smallest atom `x` with `cdf(x) >= p`.
    pub fn quantile(&self, p: f64) -> f64 {
        let mut acc = 0.0;
        for (v, q) in self.values.iter().zip(&self.probs) {
            acc += q;
            if acc >= p - 1e-12 {
                return *v;
            }
        }
        *self.values.last().expect("non-empty")
    }
}

/// Exact law of a statistic under an assignment distribution, treating the
/// observed responses as fixed (sharp null).
pub fn exact_statistic_distribution(q: &ScoreMatrix<f64>, dist: &AssignmentDist, stat: &Statistic) -> Result<ExactDistribution> {
    if dist.space.layout != *q.layout() {
        return Err(Error::Dimension("assignment space does not match the study".into()));
    }
    let rho = unit_probs_from_assignment_dist(dist);
    let (values, observed) = statistic_values(q, &dist.space, rho.as_slice(), stat)?;
    Ok(ExactDistribution::from_atoms(&values, &dist.probs, observed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCasePValue {
    pub pvalue: f64,
    pub u: Vec<f64>,
}

/// Largest exact p-value over `u` at the vertices of the unit cube.
pub fn exact_worst_case_pvalue(q: &ScoreMatrix<f64>, gamma: f64, stat: &Statistic) -> Result<WorstCasePValue> {
    let n = q.num_units();
    if n > MAX_CUBE_UNITS {
        return Err(Error::TooLarge { what: "units for confounder enumeration", value: n, limit: MAX_CUBE_UNITS });
    }
    let space = AssignmentSpace::new(q.layout())?;
    let fixed = match stat {
        Statistic::CoherentA => None,
        _ => Some(statistic_values(q, &space, &vec![0.0; n], stat)?),
    };
    let count = if gamma == 1.0 { 1u32 } else { 1u32 << n };
    let results = (0..count)
        .into_par_iter()
        .map(|mask| {
            let u = ConfounderVector { u: (0..n).map(|j| f64::from((mask >> j) & 1)).collect() };
            let p = pvalue_at(q, &space, &u, gamma, stat, fixed.as_ref())?;
            Ok((p, mask))
        })
        .collect::<Result<Vec<_>>>()?;
    let (pvalue, mask) = results
        .into_iter()
        .fold((f64::NEG_INFINITY, 0), |acc, r| if r.0 > acc.0 { r } else { acc });
    Ok(WorstCasePValue { pvalue, u: (0..n).map(|j| f64::from((mask >> j) & 1)).collect() })
}

/// Exact p-value at a given confounder.
pub fn pvalue_at_u(q: &ScoreMatrix<f64>, u: &ConfounderVector, gamma: f64, stat: &Statistic) -> Result<f64> {
    let space = AssignmentSpace::new(q.layout())?;
    pvalue_at(q, &space, u, gamma, stat, None)
}

fn pvalue_at(
    q: &ScoreMatrix<f64>,
    space: &AssignmentSpace,
    u: &ConfounderVector,
    gamma: f64,
    stat: &Statistic,
    fixed: Option<&(Vec<f64>, f64)>,
) -> Result<f64> {
    let dist = biased_probs(space, u, gamma)?;
    let owned;
    let (values, observed) = match fixed {
        Some(f) => (&f.0, f.1),
        None => {
            let rho = unit_probs_from_assignment_dist(&dist);
            owned = statistic_values(q, space, rho.as_slice(), stat)?;
            (&owned.0, owned.1)
        }
    };
    let tol = 1e-12 * (1.0 + observed.abs());
    Ok(values.iter().zip(&dist.probs).filter(|(v, _)| **v >= observed - tol).map(|(_, p)| p).sum())
}
