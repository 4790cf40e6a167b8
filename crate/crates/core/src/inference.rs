//! Tests at a given Gamma, changepoint search over Gamma, closed testing and
//! the Bonferroni baseline.

use std::collections::HashMap;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::chibar::{chi2_quantile, perlman_quantile};
use crate::critical::{correlation_box, worst_case_quantile, CorrelationOptions, QuantileOptions, WorstCaseQuantile};
use crate::error::{Error, Result};
use crate::game::{solve_worst_case, GameOptions, GameResult, LambdaSpec};
use crate::model::{ScoreMatrix, ScoreScheme};

/// Largest outcome count for closed testing.
pub const MAX_CLOSED_K: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", content = "directions", rename_all = "kebab-case")]
pub enum Method {
    /// Coherent cone with the worst-case chi-bar critical value.
    Chibar,
    /// `{1_K}` against `z_{1-alpha}`.
    EqualWeight,
    /// `{e_1..e_K}` against `z_{1-alpha/K}`.
    PerOutcomeMax,
    /// A user-supplied finite set against `z_{1-alpha/|set|}`.
    UserFinite(Vec<Vec<f64>>),
    /// Every direction against `sqrt(chi^2_{K,1-alpha})`; not a valid one-sided test.
    Unconstrained,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Chibar => "chibar",
            Method::EqualWeight => "equal-weight",
            Method::PerOutcomeMax => "per-outcome-max",
            Method::UserFinite(_) => "user-finite",
            Method::Unconstrained => "unconstrained",
        }
    }

    pub fn lambda_spec(&self, k: usize) -> LambdaSpec<f64> {
        match self {
            Method::Chibar => LambdaSpec::Cone,
            Method::EqualWeight => LambdaSpec::equal_weight(k),
            Method::PerOutcomeMax => LambdaSpec::per_outcome(k),
            Method::UserFinite(v) => LambdaSpec::Finite(v.clone()),
            Method::Unconstrained => LambdaSpec::Unconstrained,
        }
    }

    /// The method applied to a subset of outcomes.
    fn restrict(&self, subset: &[usize]) -> Result<Method> {
        match self {
            Method::UserFinite(v) => {
                let mut out: Vec<Vec<f64>> = Vec::new();
                for dir in v {
                    let outside = (0..dir.len()).any(|i| !subset.contains(&i) && dir[i] != 0.0);
                    if !outside {
                        out.push(subset.iter().map(|&i| dir[i]).collect());
                    }
                }
                if out.is_empty() {
                    return Err(Error::Lambda(format!("no direction is supported on outcomes {subset:?}")));
                }
                Ok(Method::UserFinite(out))
            }
            m => Ok(m.clone()),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    /// Parses the names of the built-in methods; user-finite sets need their directions.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chibar" => Ok(Method::Chibar),
            "equal-weight" => Ok(Method::EqualWeight),
            "per-outcome-max" => Ok(Method::PerOutcomeMax),
            "unconstrained" => Ok(Method::Unconstrained),
            other => Err(Error::Invalid(format!(
                "unknown method {other:?} (expected chibar, equal-weight, per-outcome-max or unconstrained)"
            ))),
        }
    }
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p)
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 0.5) {
        return Err(Error::AlphaOutOfRange(alpha));
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub game: GameOptions,
    pub correlation: CorrelationOptions,
    pub quantile: QuantileOptions,
}

impl InferenceOptions {
    fn game_quiet(&self) -> GameOptions {
        GameOptions { record_trace: false, ..self.game.clone() }
    }
}

/// How the critical value in a record was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CriticalKind {
    Exact,
    /// The deviate fell below a lower bound on the chi-bar critical value.
    LowerBound,
    /// The deviate exceeded the Perlman upper bound.
    UpperBound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRecord {
    pub gamma: f64,
    pub outcomes: Vec<usize>,
    pub method: String,
    pub a_star: f64,
    /// Certified lower bound on `max(0, a_star)`; a decision may stop the
    /// solver once the two bracket the critical value.
    pub a_lower: f64,
    pub b_star: f64,
    pub critical_value: f64,
    pub critical_kind: CriticalKind,
    pub reject: bool,
    pub lambda_star: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub ridged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quantile: Option<WorstCaseQuantile>,
}

/// A study prepared for repeated tests at one level.
pub struct Analysis<'a> {
    q: &'a ScoreMatrix<f64>,
    alpha: f64,
    method: Method,
    opts: InferenceOptions,
    /// Worst-case quantiles keyed by (Gamma bits, outcome subset).
    cache: Mutex<HashMap<(u64, Vec<usize>), WorstCaseQuantile>>,
}

impl<'a> Analysis<'a> {
    pub fn new(q: &'a ScoreMatrix<f64>, alpha: f64, method: Method, opts: InferenceOptions) -> Result<Self> {
        check_alpha(alpha)?;
        q.ensure_nondegenerate()?;
        method.lambda_spec(q.num_outcomes()).validate(q.num_outcomes())?;
        Ok(Self { q, alpha, method, opts, cache: Mutex::new(HashMap::new()) })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn method(&self) -> &Method {
        &self.method
    }

    pub fn num_outcomes(&self) -> usize {
        self.q.num_outcomes()
    }

    fn subset_scores(&self, subset: &[usize]) -> Result<std::borrow::Cow<'a, ScoreMatrix<f64>>> {
        if subset.len() == self.q.num_outcomes() && subset.iter().enumerate().all(|(i, &s)| i == s) {
            Ok(std::borrow::Cow::Borrowed(self.q))
        } else {
            Ok(std::borrow::Cow::Owned(self.q.select_outcomes(subset)?))
        }
    }

    fn all(&self) -> Vec<usize> {
        (0..self.q.num_outcomes()).collect()
    }

    /// Full test on all outcomes, with an exact critical value.
    pub fn test(&self, gamma: f64) -> Result<TestRecord> {
        self.run(gamma, &self.all(), false, f64::NEG_INFINITY)
    }

    /// Test that skips the chi-bar search when bounds settle the decision.
    pub fn decide(&self, gamma: f64, subset: &[usize]) -> Result<TestRecord> {
        self.run(gamma, subset, true, f64::NEG_INFINITY)
    }

    /// As [`Analysis::decide`], given a known lower bound on the chi-bar
    /// critical value at `gamma`, such as the exact value at a smaller gamma.
    pub fn decide_with_floor(&self, gamma: f64, subset: &[usize], floor: f64) -> Result<TestRecord> {
        self.run(gamma, subset, true, floor)
    }

    fn run(&self, gamma: f64, subset: &[usize], lazy: bool, floor: f64) -> Result<TestRecord> {
        let q = self.subset_scores(subset)?;
        let method = self.method.restrict(subset)?;
        let k = q.num_outcomes();
        let spec = method.lambda_spec(k);
        let fixed = match &method {
            Method::Chibar => None,
            Method::EqualWeight => Some(normal_quantile(1.0 - self.alpha)),
            Method::PerOutcomeMax => Some(normal_quantile(1.0 - self.alpha / k as f64)),
            Method::UserFinite(v) => Some(normal_quantile(1.0 - self.alpha / v.len() as f64)),
            Method::Unconstrained => Some(chi2_quantile(k, 1.0 - self.alpha).sqrt()),
        };
        // a decision only needs the deviate resolved relative to the critical value
        let solve = |target: Option<f64>| {
            let mut o = self.opts.game_quiet();
            if lazy {
                o.target = target;
            }
            solve_worst_case(q.as_ref(), gamma, &spec, &o)
        };
        if let Some(c) = fixed {
            let game = solve(Some(c))?;
            return Ok(record(gamma, subset, &method, &game, c, CriticalKind::Exact, None));
        }
        let floor = floor.max(normal_quantile(1.0 - self.alpha));
        let mut game = solve(Some(floor))?;
        let (c, kind, quantile) = self.chibar_critical(q.as_ref(), gamma, subset, &game, lazy, floor)?;
        if lazy && kind == CriticalKind::Exact && game.a_star >= c && game.lower_bound < c {
            game = solve(Some(c))?;
        }
        Ok(record(gamma, subset, &method, &game, c, kind, quantile))
    }

    fn chibar_critical(
        &self,
        q: &ScoreMatrix<f64>,
        gamma: f64,
        subset: &[usize],
        game: &GameResult<f64>,
        lazy: bool,
        floor: f64,
    ) -> Result<(f64, CriticalKind, Option<WorstCaseQuantile>)> {
        let k = q.num_outcomes();
        if lazy && k > 1 {
            if game.a_star < floor {
                return Ok((floor, CriticalKind::LowerBound, None));
            }
            let ceiling = perlman_quantile(self.alpha, k).sqrt();
            if game.lower_bound >= ceiling {
                return Ok((ceiling, CriticalKind::UpperBound, None));
            }
        }
        let key = (gamma.to_bits(), subset.to_vec());
        if let Some(w) = self.cache.lock().unwrap().get(&key) {
            return Ok((w.critical_value, CriticalKind::Exact, Some(w.clone())));
        }
        let bx = correlation_box(q, gamma, &self.opts.correlation)?;
        let w = worst_case_quantile(&bx, self.alpha, &self.opts.quantile)?;
        self.cache.lock().unwrap().insert(key, w.clone());
        Ok((w.critical_value, CriticalKind::Exact, Some(w)))
    }

    /// Changepoint Gamma for the test on `subset`.
    pub fn changepoint_subset(&self, subset: &[usize], grid: &GammaGrid) -> Result<ChangepointResult> {
        changepoint_search(grid, |g| Ok(self.decide(g, subset)?.reject))
    }

    pub fn changepoint(&self, grid: &GammaGrid) -> Result<ChangepointResult> {
        self.changepoint_subset(&self.all(), grid)
    }

    /// Closed testing at `gamma` over every non-empty outcome subset.
    pub fn closed_testing(&self, gamma: f64) -> Result<ClosedTesting> {
        let subsets = nonempty_subsets(self.num_outcomes())?;
        let records: Vec<TestRecord> =
            subsets.par_iter().map(|s| self.decide(gamma, s)).collect::<Result<_>>()?;
        let per_outcome = (0..self.num_outcomes())
            .map(|k| records.iter().filter(|r| r.outcomes.contains(&k)).all(|r| r.reject))
            .collect();
        Ok(ClosedTesting { gamma, subsets: records, per_outcome })
    }

    /// Per-outcome changepoints implied by closed testing: for outcome `k`,
    /// the smallest subset changepoint over subsets containing `k`.
    pub fn closed_changepoints(&self, grid: &GammaGrid) -> Result<Vec<SubsetChangepoint>> {
        let subsets = nonempty_subsets(self.num_outcomes())?;
        subsets
            .par_iter()
            .map(|s| Ok(SubsetChangepoint { outcomes: s.clone(), result: self.changepoint_subset(s, grid)? }))
            .collect()
    }
}

fn record(
    gamma: f64,
    subset: &[usize],
    method: &Method,
    game: &GameResult<f64>,
    critical_value: f64,
    critical_kind: CriticalKind,
    quantile: Option<WorstCaseQuantile>,
) -> TestRecord {
    TestRecord {
        gamma,
        outcomes: subset.to_vec(),
        method: method.name().into(),
        a_star: game.a_star,
        a_lower: game.lower_bound,
        b_star: game.b_star,
        critical_value,
        critical_kind,
        reject: game.a_star > 0.0 && game.a_star >= critical_value,
        lambda_star: game.lambda_star.clone(),
        iterations: game.iterations,
        converged: game.converged,
        ridged: game.ridged,
        quantile,
    }
}

/// Global test at one Gamma.
pub fn global_test(q: &ScoreMatrix<f64>, gamma: f64, alpha: f64, method: Method, opts: &InferenceOptions) -> Result<TestRecord> {
    Analysis::new(q, alpha, method, opts.clone())?.test(gamma)
}

/// The negative-control test over every nonzero direction.
pub fn unconstrained_test(q: &ScoreMatrix<f64>, gamma: f64, alpha: f64, opts: &InferenceOptions) -> Result<TestRecord> {
    global_test(q, gamma, alpha, Method::Unconstrained, opts)
}

/// All non-empty subsets of `0..k`, smallest first.
pub fn nonempty_subsets(k: usize) -> Result<Vec<Vec<usize>>> {
    if k > MAX_CLOSED_K {
        return Err(Error::TooLarge { what: "outcomes for closed testing", value: k, limit: MAX_CLOSED_K });
    }
    let mut out: Vec<Vec<usize>> =
        (1u32..(1 << k)).map(|m| (0..k).filter(|&i| m >> i & 1 == 1).collect()).collect();
    out.sort_by_key(|s| s.len());
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedTesting {
    pub gamma: f64,
    pub subsets: Vec<TestRecord>,
    pub per_outcome: Vec<bool>,
}

pub fn closed_testing(q: &ScoreMatrix<f64>, gamma: f64, alpha: f64, method: Method, opts: &InferenceOptions) -> Result<ClosedTesting> {
    Analysis::new(q, alpha, method, opts.clone())?.closed_testing(gamma)
}

/// Separate univariate worst-case tests at level `alpha / K`.
pub fn bonferroni_per_outcome(q: &ScoreMatrix<f64>, gamma: f64, alpha: f64, opts: &InferenceOptions) -> Result<Vec<TestRecord>> {
    check_alpha(alpha)?;
    let k = q.num_outcomes();
    let crit = normal_quantile(1.0 - alpha / k as f64);
    (0..k)
        .map(|o| {
            let qk = q.select_outcomes(&[o])?;
            let game = solve_worst_case(&qk, gamma, &LambdaSpec::Cone, &opts.game_quiet())?;
            Ok(record(gamma, &[o], &Method::PerOutcomeMax, &game, crit, CriticalKind::Exact, None))
        })
        .collect()
}

/// Per-outcome changepoints of the Bonferroni baseline.
pub fn bonferroni_changepoints(q: &ScoreMatrix<f64>, alpha: f64, grid: &GammaGrid, opts: &InferenceOptions) -> Result<Vec<ChangepointResult>> {
    check_alpha(alpha)?;
    let k = q.num_outcomes();
    let crit = normal_quantile(1.0 - alpha / k as f64);
    (0..k)
        .into_par_iter()
        .map(|o| {
            let qk = q.select_outcomes(&[o])?;
            changepoint_search(grid, |g| {
                let game = solve_worst_case(&qk, g, &LambdaSpec::Cone, &opts.game_quiet())?;
                Ok(game.a_star > 0.0 && game.a_star >= crit)
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaGrid {
    pub min: f64,
    pub max: f64,
    pub resolution: f64,
}

impl Default for GammaGrid {
    fn default() -> Self {
        Self { min: 1.0, max: 10.0, resolution: 0.01 }
    }
}

impl GammaGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.min >= 1.0) {
            return Err(Error::GammaBelowOne(self.min));
        }
        if !(self.max >= self.min && self.resolution > 0.0) {
            return Err(Error::Invalid(format!("bad Gamma grid {self:?}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        ((self.max - self.min) / self.resolution + 1e-9).floor() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn point(&self, j: usize) -> f64 {
        let v = self.min + j as f64 * self.resolution;
        (v * 1e9).round() / 1e9
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "gamma", rename_all = "kebab-case")]
pub enum Changepoint {
    /// No rejection at the grid minimum.
    Below(f64),
    /// Largest grid Gamma with rejection.
    Exact(f64),
    /// Rejection at the grid maximum.
    AtLeast(f64),
}

impl Changepoint {
    /// Numeric value for comparisons (`Below` maps to the grid minimum).
    pub fn value(&self) -> f64 {
        match *self {
            Changepoint::Below(g) | Changepoint::Exact(g) | Changepoint::AtLeast(g) => g,
        }
    }
}

impl std::fmt::Display for Changepoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Changepoint::Below(g) => write!(f, "< {g}"),
            Changepoint::Exact(g) => write!(f, "{g}"),
            Changepoint::AtLeast(g) => write!(f, ">= {g}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangepointResult {
    pub changepoint: Changepoint,
    /// Whether the coarse-grid monotonicity check passed.
    pub monotone: bool,
    pub evaluations: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetChangepoint {
    pub outcomes: Vec<usize>,
    pub result: ChangepointResult,
}

/// Per-outcome closed-testing changepoint: minimum over subsets containing the outcome.
pub fn closed_outcome_changepoints(k: usize, subsets: &[SubsetChangepoint]) -> Vec<Changepoint> {
    (0..k)
        .map(|o| {
            subsets
                .iter()
                .filter(|s| s.outcomes.contains(&o))
                .map(|s| s.result.changepoint)
                .min_by(|a, b| a.value().partial_cmp(&b.value()).unwrap())
                .expect("every outcome is in some subset")
        })
        .collect()
}

/// Bisection over grid indices assuming rejection is non-increasing in Gamma,
/// checked afterwards on a coarse grid; falls back to an upward scan.
pub fn changepoint_search(grid: &GammaGrid, mut rejects: impl FnMut(f64) -> Result<bool>) -> Result<ChangepointResult> {
    grid.validate()?;
    let m = grid.len() - 1;
    let mut memo: HashMap<usize, bool> = HashMap::new();
    let mut at = |j: usize, memo: &mut HashMap<usize, bool>| -> Result<bool> {
        if let Some(&r) = memo.get(&j) {
            return Ok(r);
        }
        let r = rejects(grid.point(j))?;
        memo.insert(j, r);
        Ok(r)
    };
    if !at(0, &mut memo)? {
        return Ok(ChangepointResult {
            changepoint: Changepoint::Below(grid.min),
            monotone: true,
            evaluations: memo.len(),
            warnings: vec![format!("no rejection at Gamma = {}", grid.min)],
        });
    }
    if at(m, &mut memo)? {
        return Ok(ChangepointResult {
            changepoint: Changepoint::AtLeast(grid.point(m)),
            monotone: true,
            evaluations: memo.len(),
            warnings: vec![],
        });
    }
    let (mut lo, mut hi) = (0, m);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if at(mid, &mut memo)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // coarse verification
    let coarse = 10.min(m);
    let mut monotone = true;
    for c in 1..coarse {
        let j = c * m / coarse;
        if j == lo || j == hi {
            continue;
        }
        let r = at(j, &mut memo)?;
        if (j < lo && !r) || (j > hi && r) {
            monotone = false;
            break;
        }
    }
    let mut warnings = vec![];
    if !monotone {
        warnings.push("rejection is not monotone in Gamma; changepoint from an upward scan".into());
        let mut j = 0;
        while j < m && at(j + 1, &mut memo)? {
            j += 1;
        }
        let cp = if j == m { Changepoint::AtLeast(grid.point(m)) } else { Changepoint::Exact(grid.point(j)) };
        return Ok(ChangepointResult { changepoint: cp, monotone, evaluations: memo.len(), warnings });
    }
    Ok(ChangepointResult { changepoint: Changepoint::Exact(grid.point(lo)), monotone, evaluations: memo.len(), warnings })
}

/// Changepoint of the global test.
pub fn changepoint_gamma(
    q: &ScoreMatrix<f64>,
    alpha: f64,
    method: Method,
    grid: &GammaGrid,
    opts: &InferenceOptions,
) -> Result<ChangepointResult> {
    Analysis::new(q, alpha, method, opts.clone())?.changepoint(grid)
}

/// Warning for equal weighting of user scores on visibly different scales.
pub fn scale_warning(q: &ScoreMatrix<f64>, method: &Method) -> Option<String> {
    if !matches!(method, Method::EqualWeight) || !matches!(q.scheme(), ScoreScheme::UserSupplied) {
        return None;
    }
    let rms = q.column_rms();
    let max = rms.iter().cloned().fold(0.0, f64::max);
    let min = rms.iter().cloned().fold(f64::INFINITY, f64::min);
    (max > 3.0 * min).then(|| {
        format!("equal weighting assumes outcomes on a common scale; score RMS ranges from {min:.3} to {max:.3}")
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub outcome_names: Vec<String>,
    pub alpha: f64,
    pub method: Method,
    /// Sorted by Gamma.
    pub records: Vec<TestRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub changepoint: Option<ChangepointResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub closed_testing: Option<ClosedTestingReport>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedTestingReport {
    pub subsets: Vec<SubsetChangepoint>,
    pub per_outcome: Vec<Changepoint>,
    pub bonferroni: Vec<ChangepointResult>,
}

impl SensitivityReport {
    pub const CSV_COLUMNS: [&'static str; 9] =
        ["gamma", "subset", "method", "a_star", "b_star", "critical_value", "critical_kind", "reject", "lambda_star"];

    /// One row per Gamma per subset.
    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        let mut rows = Vec::new();
        let mut push = |r: &TestRecord| {
            rows.push(vec![
                r.gamma.to_string(),
                r.outcomes.iter().map(|&o| self.outcome_names[o].clone()).collect::<Vec<_>>().join("+"),
                r.method.clone(),
                r.a_star.to_string(),
                r.b_star.to_string(),
                r.critical_value.to_string(),
                format!("{:?}", r.critical_kind).to_lowercase(),
                r.reject.to_string(),
                r.lambda_star.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(";"),
            ])
        };
        for r in &self.records {
            push(r);
        }
        rows
    }
}
