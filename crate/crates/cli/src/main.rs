use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use mvsens::chibar::{self, ChiBarSpec};
use mvsens::inference::{
    bonferroni_changepoints, closed_outcome_changepoints, scale_warning, Analysis, ClosedTestingReport, GammaGrid,
    InferenceOptions, Method, SensitivityReport, TestRecord,
};
use mvsens::linalg::SymMatrix;
use mvsens::model::{self, MatchedStudy, ScoreMatrix};
use mvsens::oracle::{exact_worst_case_pvalue, Statistic, WorstCasePValue};
use mvsens::output::{write_csv, write_json, RunHeader};
use mvsens::simulation::{self, DesignOptions, PowerTable};

#[derive(Parser)]
#[command(name = "mvsens", version, about = "Multivariate one-sided sensitivity analysis for matched studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Root seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "SENS_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Test the global null at one or more values of Gamma.
    Test(TestArgs),
    /// Largest Gamma at which the test still rejects.
    Changepoint(ChangepointArgs),
    /// Run a simulation scenario file.
    Simulate(SimulateArgs),
    /// Chi-bar-squared utilities.
    Dist(DistArgs),
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ScoreKind {
    /// Huber pair scores for pairs, aligned ranks otherwise.
    Auto,
    Huber,
    AlignedRank,
    /// Scores read from --score-file.
    File,
}

#[derive(Args, Serialize)]
struct StudyArgs {
    /// Study CSV (stratum_id,treated,y1..yK) or a JSON dump from --dump-study.
    input: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    scores: ScoreKind,
    #[arg(long, default_value_t = 2.5)]
    kappa: f64,
    /// N x K score table for --scores file.
    #[arg(long)]
    score_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// chibar, equal-weight, per-outcome-max, unconstrained or finite.
    #[arg(long, default_value = "chibar")]
    method: String,
    /// Directions for --method finite, e.g. "1,0;0.5,0.5".
    #[arg(long)]
    directions: Option<String>,
    /// Monte Carlo draws for chi-bar critical values with four or more outcomes.
    #[arg(long, default_value_t = chibar::DEFAULT_DRAWS)]
    draws: usize,
    #[arg(long)]
    out_json: Option<PathBuf>,
    #[arg(long)]
    out_csv: Option<PathBuf>,
    /// Write the parsed study as JSON.
    #[arg(long)]
    dump_study: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct TestArgs {
    #[command(flatten)]
    study: StudyArgs,
    /// Values of Gamma, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    gamma: Vec<f64>,
    /// Add every subset test and per-outcome decisions.
    #[arg(long)]
    closed_testing: bool,
    /// Exact worst-case p-value by enumeration (small studies only).
    #[arg(long)]
    oracle: bool,
}

#[derive(Args, Serialize)]
struct ChangepointArgs {
    #[command(flatten)]
    study: StudyArgs,
    #[arg(long, default_value_t = 1.0)]
    gamma_min: f64,
    #[arg(long, default_value_t = 10.0)]
    gamma_max: f64,
    #[arg(long, default_value_t = 0.01)]
    resolution: f64,
    /// Per-outcome changepoints by closed testing, with the Bonferroni baseline.
    #[arg(long)]
    closed_testing: bool,
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    scenario: PathBuf,
    /// Override the replicate count of every cell.
    #[arg(long)]
    reps: Option<usize>,
    /// Estimate design sensitivities instead of power.
    #[arg(long)]
    design_sensitivity: bool,
    #[arg(long, default_value_t = 200_000)]
    design_pairs: usize,
    #[arg(long, default_value_t = 5)]
    design_seeds: usize,
    /// Also write a wide table with one rate column per method at the first Gamma.
    #[arg(long)]
    wide_csv: Option<PathBuf>,
    #[arg(long)]
    out_json: Option<PathBuf>,
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct DistArgs {
    #[command(subcommand)]
    what: DistCommand,
}

#[derive(Subcommand, Serialize)]
enum DistCommand {
    /// Mixing weights w_0..w_K.
    Weights(CorrArgs),
    /// Upper quantile at level alpha.
    Quantile {
        #[command(flatten)]
        corr: CorrArgs,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// P(chi-bar <= value).
    Cdf {
        #[command(flatten)]
        corr: CorrArgs,
        #[arg(long)]
        value: f64,
    },
    /// Perlman's bound: p-value at --value or quantile at --alpha.
    Perlman {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        value: Option<f64>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
}

#[derive(Args, Serialize)]
struct CorrArgs {
    /// Correlation matrix rows, e.g. "1,0.3;0.3,1".
    #[arg(long, conflicts_with = "k")]
    corr: Option<String>,
    /// Dimension of an identity correlation.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = chibar::DEFAULT_DRAWS)]
    draws: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Test(a) => cmd_test(a, cli.seed),
        Command::Changepoint(a) => cmd_changepoint(a, cli.seed),
        Command::Simulate(a) => cmd_simulate(a, cli.seed),
        Command::Dist(a) => cmd_dist(&a.what, cli.seed),
    }
}

fn options(seed: u64, draws: usize) -> InferenceOptions {
    let mut o = InferenceOptions::default();
    o.game.seed = seed;
    o.correlation.seed = seed;
    o.quantile.seed = seed;
    o.quantile.draws = draws;
    o
}

fn parse_rows(text: &str) -> Result<Vec<Vec<f64>>> {
    text.split(';')
        .map(|row| {
            row.split(',')
                .map(|v| v.trim().parse::<f64>().with_context(|| format!("not a number: {v:?}")))
                .collect()
        })
        .collect()
}

fn parse_method(a: &StudyArgs) -> Result<Method> {
    if a.method == "finite" {
        let d = a.directions.as_deref().context("--method finite needs --directions")?;
        return Ok(Method::UserFinite(parse_rows(d)?));
    }
    if a.directions.is_some() {
        bail!("--directions only applies to --method finite");
    }
    Ok(a.method.parse()?)
}

fn load(path: &Path) -> Result<MatchedStudy<f64>> {
    let study = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        model::load_study_json(path)?
    } else {
        model::load_study(path)?
    };
    Ok(study)
}

struct Prepared {
    study: MatchedStudy<f64>,
    q: ScoreMatrix<f64>,
    method: Method,
    opts: InferenceOptions,
    warnings: Vec<String>,
}

fn prepare(a: &StudyArgs, seed: u64) -> Result<Prepared> {
    let study = load(&a.input)?;
    if let Some(p) = &a.dump_study {
        std::fs::write(p, study.to_json()?).with_context(|| format!("writing {}", p.display()))?;
    }
    let pairs = study.layout().all_pairs();
    let q = match a.scores {
        ScoreKind::Auto if pairs => model::huber_pair_scores(&study, a.kappa)?,
        ScoreKind::Auto | ScoreKind::AlignedRank => model::aligned_rank_scores(&study)?,
        ScoreKind::Huber => model::huber_pair_scores(&study, a.kappa)?,
        ScoreKind::File => {
            let p = a.score_file.as_ref().context("--scores file needs --score-file")?;
            model::user_scores(&study, &model::load_score_rows(p)?)?
        }
    };
    let method = parse_method(a)?;
    let warnings = scale_warning(&q, &method).into_iter().collect::<Vec<_>>();
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    Ok(Prepared { study, q, method, opts: options(seed, a.draws), warnings })
}

fn emit_report<B: Serialize>(
    header: &RunHeader,
    body: &B,
    csv: Option<(&[&str], Vec<Vec<String>>)>,
    out_json: Option<&Path>,
    out_csv: Option<&Path>,
) -> Result<()> {
    match out_json {
        Some(p) => write_json(p, header, body)?,
        None => println!("{}", serde_json::to_string_pretty(&json!({"header": header, "body": body}))?),
    }
    if let (Some(p), Some((cols, rows))) = (out_csv, csv) {
        write_csv(p, header, cols, &rows)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TestBody {
    report: SensitivityReport,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    oracle: Vec<OracleRecord>,
}

#[derive(Serialize)]
struct OracleRecord {
    gamma: f64,
    #[serde(flatten)]
    result: WorstCasePValue,
}

fn cmd_test(a: &TestArgs, seed: u64) -> Result<()> {
    let p = prepare(&a.study, seed)?;
    let mut gammas = a.gamma.clone();
    gammas.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let analysis = Analysis::new(&p.q, a.study.alpha, p.method.clone(), p.opts.clone())?;
    let mut records: Vec<TestRecord> = Vec::new();
    let mut closed = Vec::new();
    for &g in &gammas {
        records.push(analysis.test(g)?);
        if a.closed_testing {
            let ct = analysis.closed_testing(g)?;
            closed.push(ct.per_outcome.clone());
            records.extend(ct.subsets.into_iter().filter(|r| r.outcomes.len() < p.q.num_outcomes()));
        }
    }
    let mut warnings = p.warnings.clone();
    for (g, per) in gammas.iter().zip(&closed) {
        let names: Vec<&str> = per
            .iter()
            .enumerate()
            .filter(|(_, r)| **r)
            .map(|(k, _)| p.study.outcome_names()[k].as_str())
            .collect();
        warnings.push(format!("closed testing at Gamma = {g}: rejected [{}]", names.join(", ")));
    }
    let oracle = if a.oracle {
        gammas
            .iter()
            .map(|&g| Ok(OracleRecord { gamma: g, result: exact_worst_case_pvalue(&p.q, g, &Statistic::CoherentA)? }))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let report = SensitivityReport {
        outcome_names: p.study.outcome_names().to_vec(),
        alpha: a.study.alpha,
        method: p.method.clone(),
        records,
        changepoint: None,
        closed_testing: None,
        warnings,
    };
    let header = RunHeader::new("test", seed, json!({"args": a, "options": p.opts}));
    let rows = report.csv_rows();
    emit_report(
        &header,
        &TestBody { report, oracle },
        Some((&SensitivityReport::CSV_COLUMNS, rows)),
        a.study.out_json.as_deref(),
        a.study.out_csv.as_deref(),
    )
}

fn cmd_changepoint(a: &ChangepointArgs, seed: u64) -> Result<()> {
    let p = prepare(&a.study, seed)?;
    let grid = GammaGrid { min: a.gamma_min, max: a.gamma_max, resolution: a.resolution };
    grid.validate()?;
    let analysis = Analysis::new(&p.q, a.study.alpha, p.method.clone(), p.opts.clone())?;
    let cp = analysis.changepoint(&grid)?;
    let mut warnings = p.warnings.clone();
    warnings.extend(cp.warnings.iter().cloned());
    let mut records = vec![analysis.test(grid.min)?];
    if let mvsens::inference::Changepoint::Exact(g) = cp.changepoint {
        if g > grid.min {
            records.push(analysis.test(g)?);
        }
    }
    let closed_testing = if a.closed_testing {
        let subsets = analysis.closed_changepoints(&grid)?;
        let per_outcome = closed_outcome_changepoints(p.q.num_outcomes(), &subsets);
        let bonferroni = bonferroni_changepoints(&p.q, a.study.alpha, &grid, &p.opts)?;
        Some(ClosedTestingReport { subsets, per_outcome, bonferroni })
    } else {
        None
    };
    let names = p.study.outcome_names().to_vec();
    let report = SensitivityReport {
        outcome_names: names.clone(),
        alpha: a.study.alpha,
        method: p.method.clone(),
        records,
        changepoint: Some(cp.clone()),
        closed_testing: closed_testing.clone(),
        warnings,
    };
    let mut rows = vec![vec!["global".to_string(), names.join("+"), cp.changepoint.to_string(), String::new()]];
    if let Some(ct) = &closed_testing {
        for (k, c) in ct.per_outcome.iter().enumerate() {
            rows.push(vec![
                "closed".into(),
                names[k].clone(),
                c.to_string(),
                ct.bonferroni[k].changepoint.to_string(),
            ]);
        }
    }
    let header = RunHeader::new("changepoint", seed, json!({"args": a, "options": p.opts}));
    emit_report(
        &header,
        &report,
        Some((&["kind", "outcomes", "changepoint", "bonferroni"], rows)),
        a.study.out_json.as_deref(),
        a.study.out_csv.as_deref(),
    )
}

fn cmd_simulate(a: &SimulateArgs, seed: u64) -> Result<()> {
    let mut cells = simulation::load_scenarios(&a.scenario)?;
    if let Some(r) = a.reps {
        if r == 0 {
            bail!("--reps must be at least 1");
        }
        for c in &mut cells {
            c.replicates = r;
        }
    }
    let opts = options(seed, chibar::DEFAULT_DRAWS);
    let header = RunHeader::new("simulate", seed, json!({"args": a, "cells": cells, "options": opts}));
    if a.design_sensitivity {
        let d = DesignOptions { pairs: a.design_pairs, seeds: a.design_seeds, ..DesignOptions::default() };
        let mut out = Vec::new();
        let mut rows = Vec::new();
        for c in &cells {
            for m in &c.methods {
                let r = simulation::design_sensitivity_estimate(c, m, &d)?;
                rows.push(vec![c.label.clone(), r.method.clone(), format!("{:.4}", r.estimate), format!("{:.4}", r.spread)]);
                out.push(json!({"scenario": c.label, "result": r}));
            }
        }
        return emit_report(
            &header,
            &out,
            Some((&["scenario", "method", "design_sensitivity", "spread"], rows)),
            a.out_json.as_deref(),
            a.out_csv.as_deref(),
        );
    }
    let tables = cells.iter().map(|c| simulation::power_curve(c, &opts)).collect::<mvsens::Result<Vec<PowerTable>>>()?;
    let rows: Vec<Vec<String>> = tables.iter().flat_map(|t| t.csv_rows()).collect();
    if let Some(p) = &a.wide_csv {
        let (cols, wide) = simulation::type1_layout(&tables);
        let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
        write_csv(p, &header, &cols, &wide)?;
    }
    emit_report(&header, &tables, Some((&PowerTable::CSV_COLUMNS, rows)), a.out_json.as_deref(), a.out_csv.as_deref())
}

fn spec_from(c: &CorrArgs) -> Result<ChiBarSpec> {
    match (&c.corr, c.k) {
        (Some(text), _) => Ok(ChiBarSpec::new(SymMatrix::from_rows(&parse_rows(text)?)?)?),
        (None, Some(k)) if k >= 1 => Ok(ChiBarSpec::identity(k)),
        _ => bail!("give --corr or --k"),
    }
}

fn cmd_dist(d: &DistCommand, seed: u64) -> Result<()> {
    let body = match d {
        DistCommand::Weights(c) => {
            let w = chibar::chibar_weights(&spec_from(c)?, c.draws, seed)?;
            json!({"weights": w})
        }
        DistCommand::Quantile { corr, alpha } => {
            mvsens::inference::check_alpha(*alpha)?;
            let w = chibar::chibar_weights(&spec_from(corr)?, corr.draws, seed)?;
            let q = chibar::chibar_quantile(1.0 - alpha, &w)?;
            json!({"alpha": alpha, "quantile": q, "sqrt": q.value.sqrt(), "weights": w})
        }
        DistCommand::Cdf { corr, value } => {
            let w = chibar::chibar_weights(&spec_from(corr)?, corr.draws, seed)?;
            json!({"value": value, "cdf": chibar::chibar_cdf(*value, &w), "weights": w})
        }
        DistCommand::Perlman { k, value, alpha } => {
            if *k == 0 {
                bail!("--k must be at least 1");
            }
            match value {
                Some(c) => json!({"k": k, "value": c, "pvalue": chibar::perlman_pvalue(*c, *k)}),
                None => {
                    mvsens::inference::check_alpha(*alpha)?;
                    let q = chibar::perlman_quantile(*alpha, *k);
                    json!({"k": k, "alpha": alpha, "quantile": q, "sqrt": q.sqrt()})
                }
            }
        }
    };
    let header = RunHeader::new("dist", seed, json!({"args": d}));
    emit_report(&header, &body, None, None, None)
}
