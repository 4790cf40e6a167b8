//! Simulated paired studies: power curves, Type I error tables and design
//! sensitivity.
//!
//! Scenario files are TOML. The top-level keys describe a base scenario and
//! each optional `[[cells]]` entry overrides some of them:
//!
//! ```toml
//! name = "type1"
//! pairs = 20
//! outcomes = 2
//! tau = [-0.5, 0.0]
//! rho = 0.0
//! kappa = 2.5
//! methods = ["per-outcome-max", "chibar", "unconstrained"]
//! gammas = [1.0]
//! alpha = 0.05
//! replicates = 500
//! seed = 1
//!
//! [[cells]]
//! label = "tau2=-0.5"
//! tau = [-0.5, -0.5]
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{Analysis, CriticalKind, InferenceOptions, Method};
use crate::linalg::SymMatrix;
use crate::model::{huber_pair_scores, MatchedStudy, ScoreMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub label: String,
    pub pairs: usize,
    pub outcomes: usize,
    pub tau: Vec<f64>,
    /// Equicorrelation of the outcome errors.
    pub rho: f64,
    pub kappa: f64,
    pub methods: Vec<Method>,
    pub gammas: Vec<f64>,
    pub alpha: f64,
    pub replicates: usize,
    pub seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: String,
    pairs: usize,
    outcomes: usize,
    tau: Vec<f64>,
    #[serde(default)]
    rho: f64,
    #[serde(default = "default_kappa")]
    kappa: f64,
    methods: Vec<String>,
    gammas: Vec<f64>,
    #[serde(default = "default_alpha")]
    alpha: f64,
    replicates: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    cells: Vec<CellOverride>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CellOverride {
    label: String,
    pairs: Option<usize>,
    tau: Option<Vec<f64>>,
    rho: Option<f64>,
    gammas: Option<Vec<f64>>,
    replicates: Option<usize>,
    seed: Option<u64>,
}

fn default_kappa() -> f64 {
    2.5
}

fn default_alpha() -> f64 {
    0.05
}

/// Parses a scenario file into one scenario per cell (or the base scenario
/// when there are no cells).
pub fn parse_scenarios(text: &str) -> Result<Vec<SimScenario>> {
    let file: ScenarioFile = toml::from_str(text).map_err(|e| Error::Scenario(e.to_string()))?;
    let methods = file.methods.iter().map(|m| m.parse()).collect::<Result<Vec<Method>>>()?;
    let base = SimScenario {
        label: file.name.clone(),
        pairs: file.pairs,
        outcomes: file.outcomes,
        tau: file.tau,
        rho: file.rho,
        kappa: file.kappa,
        methods,
        gammas: file.gammas,
        alpha: file.alpha,
        replicates: file.replicates,
        seed: file.seed,
    };
    let out = if file.cells.is_empty() {
        vec![base]
    } else {
        file.cells
            .into_iter()
            .map(|c| SimScenario {
                label: format!("{}/{}", file.name, c.label),
                pairs: c.pairs.unwrap_or(base.pairs),
                tau: c.tau.unwrap_or_else(|| base.tau.clone()),
                rho: c.rho.unwrap_or(base.rho),
                gammas: c.gammas.unwrap_or_else(|| base.gammas.clone()),
                replicates: c.replicates.unwrap_or(base.replicates),
                seed: c.seed.unwrap_or(base.seed),
                ..base.clone()
            })
            .collect()
    };
    for s in &out {
        s.validate()?;
    }
    Ok(out)
}

pub fn load_scenarios(path: impl AsRef<Path>) -> Result<Vec<SimScenario>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    parse_scenarios(&text)
}

impl SimScenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Scenario(format!("{}: {m}", self.label)));
        if self.outcomes == 0 {
            return bad("outcomes must be >= 1".into());
        }
        if self.tau.len() != self.outcomes {
            return bad(format!("tau has {} entries for {} outcomes", self.tau.len(), self.outcomes));
        }
        if self.pairs < 2 {
            return bad("pairs must be >= 2".into());
        }
        if self.replicates == 0 {
            return bad("replicates must be >= 1".into());
        }
        let k = self.outcomes as f64;
        let lo = if self.outcomes > 1 { -1.0 / (k - 1.0) } else { -1.0 };
        if !(self.rho > lo && self.rho < 1.0) {
            return bad(format!("rho = {} leaves the equicorrelation matrix singular or indefinite", self.rho));
        }
        if !(self.kappa > 0.0) {
            return bad("kappa must be positive".into());
        }
        if self.gammas.iter().any(|g| !(*g >= 1.0)) {
            return bad("every gamma must be >= 1".into());
        }
        if self.methods.is_empty() {
            return bad("no methods listed".into());
        }
        crate::inference::check_alpha(self.alpha)
    }

    fn sorted_gammas(&self) -> Vec<f64> {
        let mut g = self.gammas.clone();
        g.sort_by(|a, b| a.partial_cmp(b).unwrap());
        g.dedup();
        g
    }
}

/// Treated-minus-control differences `tau + eps` with equicorrelated normal
/// errors, drawn from stream `rep` of the scenario seed.
pub fn draw_differences(scn: &SimScenario, rep: u64) -> Result<Vec<Vec<f64>>> {
    scn.validate()?;
    let k = scn.outcomes;
    let chol = SymMatrix::equicorrelation(k, scn.rho)
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("outcome equicorrelation".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(scn.seed);
    rng.set_stream(rep);
    let mut z = vec![0.0; k];
    let mut e = vec![0.0; k];
    let mut out = Vec::with_capacity(scn.pairs);
    for _ in 0..scn.pairs {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        chol.lower_mul_into(&z, &mut e);
        out.push(scn.tau.iter().zip(&e).map(|(t, x)| t + x).collect());
    }
    Ok(out)
}

/// A pair study with treated outcome `tau + eps` and control outcome 0.
pub fn generate_paired_data(scn: &SimScenario, rep: u64) -> Result<MatchedStudy<f64>> {
    MatchedStudy::from_pair_differences(&draw_differences(scn, rep)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub method: String,
    pub gamma: f64,
    pub rejections: usize,
    pub replicates: usize,
    pub power: f64,
    pub se: f64,
}

impl PowerRow {
    fn new(method: &str, gamma: f64, rejections: usize, replicates: usize) -> Self {
        let p = rejections as f64 / replicates as f64;
        Self { method: method.into(), gamma, rejections, replicates, power: p, se: (p * (1.0 - p) / replicates as f64).sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerTable {
    pub scenario: SimScenario,
    pub rows: Vec<PowerRow>,
}

impl PowerTable {
    pub const CSV_COLUMNS: [&'static str; 7] = ["scenario", "method", "gamma", "power", "se", "rejections", "replicates"];

    pub fn row(&self, method: &str, gamma: f64) -> Option<&PowerRow> {
        self.rows.iter().find(|r| r.method == method && (r.gamma - gamma).abs() < 1e-12)
    }

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    self.scenario.label.clone(),
                    r.method.clone(),
                    r.gamma.to_string(),
                    r.power.to_string(),
                    r.se.to_string(),
                    r.rejections.to_string(),
                    r.replicates.to_string(),
                ]
            })
            .collect()
    }
}

/// Rejection indicators `[method][gamma]` for one replicate.
fn replicate_decisions(scn: &SimScenario, gammas: &[f64], rep: u64, opts: &InferenceOptions) -> Result<Vec<Vec<bool>>> {
    let study = generate_paired_data(scn, rep)?;
    let q: ScoreMatrix<f64> = huber_pair_scores(&study, scn.kappa)?;
    let all: Vec<usize> = (0..scn.outcomes).collect();
    let mut out = Vec::with_capacity(scn.methods.len());
    for m in &scn.methods {
        let analysis = Analysis::new(&q, scn.alpha, m.clone(), opts.clone())?;
        let mut row = vec![false; gammas.len()];
        let mut floor = f64::NEG_INFINITY;
        for (j, &g) in gammas.iter().enumerate() {
            let rec = analysis.decide_with_floor(g, &all, floor)?;
            if rec.critical_kind == CriticalKind::Exact {
                floor = rec.critical_value;
            }
            row[j] = rec.reject;
            // the deviate falls and the critical value rises with gamma
            if !rec.reject {
                break;
            }
        }
        out.push(row);
    }
    Ok(out)
}

/// Rejection rates of every method at every gamma of the scenario.
pub fn power_curve(scn: &SimScenario, opts: &InferenceOptions) -> Result<PowerTable> {
    scn.validate()?;
    let gammas = scn.sorted_gammas();
    let per_rep = (0..scn.replicates as u64)
        .into_par_iter()
        .map(|rep| replicate_decisions(scn, &gammas, rep, opts))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (mi, m) in scn.methods.iter().enumerate() {
        for (j, &g) in gammas.iter().enumerate() {
            let hits = per_rep.iter().filter(|d| d[mi][j]).count();
            rows.push(PowerRow::new(m.name(), g, hits, scn.replicates));
        }
    }
    Ok(PowerTable { scenario: scn.clone(), rows })
}

/// Power curve for a scenario under the null (every effect non-positive).
pub fn type1_table(scn: &SimScenario, opts: &InferenceOptions) -> Result<PowerTable> {
    if scn.tau.iter().any(|&t| t > 0.0) {
        return Err(Error::Scenario(format!("{}: Type I error needs every tau <= 0", scn.label)));
    }
    power_curve(scn, opts)
}

/// Wide layout with one row per scenario and one rate column per method at
/// the first gamma.
pub fn type1_layout(tables: &[PowerTable]) -> (Vec<String>, Vec<Vec<String>>) {
    let Some(first) = tables.first() else { return (Vec::new(), Vec::new()) };
    let k = first.scenario.outcomes;
    let mut cols = vec!["scenario".to_string()];
    cols.extend((1..=k).map(|j| format!("tau{j}")));
    cols.push("rho".into());
    cols.push("gamma".into());
    cols.extend(first.scenario.methods.iter().map(|m| m.name().to_string()));
    let rows = tables
        .iter()
        .map(|t| {
            let g = t.scenario.sorted_gammas()[0];
            let mut r = vec![t.scenario.label.clone()];
            r.extend(t.scenario.tau.iter().map(|v| v.to_string()));
            r.push(t.scenario.rho.to_string());
            r.push(g.to_string());
            for m in &t.scenario.methods {
                r.push(t.row(m.name(), g).map_or(String::new(), |x| x.power.to_string()));
            }
            r
        })
        .collect();
    (cols, rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignOptions {
    pub pairs: usize,
    pub seeds: usize,
    /// Simplex grid resolution before the pattern search.
    pub grid: usize,
}

impl Default for DesignOptions {
    fn default() -> Self {
        Self { pairs: 200_000, seeds: 5, grid: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSensitivity {
    pub method: String,
    pub estimate: f64,
    /// Standard deviation across seeds.
    pub spread: f64,
    pub per_seed: Vec<f64>,
    pub lambda: Vec<f64>,
}

/// Largest Gamma at which the worst-case deviate of the fixed direction
/// `lambda` stays positive for pair scores `psi` (one row per pair, treated
/// unit's scores): `sum (lambda'psi)_+ / sum (lambda'psi)_-`.
///
/// For each pair the adversary can move at most `(G-1)/(G+1) |lambda'psi|`
/// of expectation, which gives the ratio directly.
pub fn pair_threshold(psi: &[Vec<f64>], lambda: &[f64]) -> f64 {
    let (mut pos, mut neg) = (0.0, 0.0);
    for row in psi {
        let s: f64 = row.iter().zip(lambda).map(|(a, b)| a * b).sum();
        if s > 0.0 {
            pos += s;
        } else {
            neg -= s;
        }
    }
    if neg == 0.0 {
        if pos > 0.0 {
            f64::INFINITY
        } else {
            1.0
        }
    } else {
        (pos / neg).max(1.0)
    }
}

/// Points `c / m` of the simplex with integer numerators summing to `m`.
fn simplex_grid(k: usize, m: usize) -> Vec<Vec<f64>> {
    fn rec(k: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k - 1 {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for c in 0..=left {
            cur.push(c);
            rec(k, left - c, cur, out);
            cur.pop();
        }
    }
    let mut raw = Vec::new();
    rec(k, m, &mut Vec::new(), &mut raw);
    raw.into_iter().map(|c| c.into_iter().map(|v| v as f64 / m as f64).collect()).collect()
}

/// Maximizes the quasi-concave threshold over the simplex: grid, then a
/// compass search with halving steps.
fn max_threshold_simplex(psi: &[Vec<f64>], k: usize, grid: usize) -> (f64, Vec<f64>) {
    let mut best = (f64::NEG_INFINITY, vec![1.0 / k as f64; k]);
    for l in simplex_grid(k, grid.max(1)) {
        let v = pair_threshold(psi, &l);
        if v > best.0 {
            best = (v, l);
        }
    }
    let mut step = 0.5 / grid.max(1) as f64;
    while step > 1e-4 {
        let mut improved = false;
        for i in 0..k {
            for j in 0..k {
                if i == j || best.1[j] < step {
                    continue;
                }
                let mut l = best.1.clone();
                l[i] += step;
                l[j] -= step;
                let v = pair_threshold(psi, &l);
                if v > best.0 + 1e-12 {
                    best = (v, l);
                    improved = true;
                }
            }
        }
        if !improved {
            step /= 2.0;
        }
    }
    best
}

/// Population-limit design sensitivity of `method` under the scenario's
/// alternative, averaged over independent large samples.
pub fn design_sensitivity_estimate(scn: &SimScenario, method: &Method, opts: &DesignOptions) -> Result<DesignSensitivity> {
    let k = scn.outcomes;
    if !matches!(method, Method::Chibar | Method::EqualWeight | Method::PerOutcomeMax) {
        return Err(Error::Invalid(format!("design sensitivity is not defined for method {}", method.name())));
    }
    if opts.seeds == 0 {
        return Err(Error::Invalid("design sensitivity needs at least one seed".into()));
    }
    let big = SimScenario { pairs: opts.pairs, ..scn.clone() };
    let results = (0..opts.seeds as u64)
        .into_par_iter()
        .map(|s| -> Result<(f64, Vec<f64>)> {
            let study = generate_paired_data(&big, s)?;
            let q = huber_pair_scores(&study, big.kappa)?;
            let psi: Vec<Vec<f64>> = (0..big.pairs).map(|i| q.row(2 * i).to_vec()).collect();
            Ok(match method {
                Method::Chibar => max_threshold_simplex(&psi, k, opts.grid),
                Method::EqualWeight => {
                    let l = vec![1.0; k];
                    (pair_threshold(&psi, &l), l)
                }
                _ => {
                    let mut best = (f64::NEG_INFINITY, Vec::new());
                    for j in 0..k {
                        let mut e = vec![0.0; k];
                        e[j] = 1.0;
                        let v = pair_threshold(&psi, &e);
                        if v > best.0 {
                            best = (v, e);
                        }
                    }
                    best
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let per_seed: Vec<f64> = results.iter().map(|r| r.0).collect();
    let n = per_seed.len() as f64;
    let mean = per_seed.iter().sum::<f64>() / n;
    let spread = if per_seed.len() > 1 {
        (per_seed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(DesignSensitivity { method: method.name().into(), estimate: mean, spread, per_seed, lambda: results[0].1.clone() })
}
