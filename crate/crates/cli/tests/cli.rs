use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mvsens"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env_remove("SENS_THREADS").output().expect("spawn mvsens")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

/// Paired study with a positive shift on every outcome; `scale` stretches the last one.
fn write_study(dir: &Path, pairs: usize, scale: f64) -> PathBuf {
    let mut s = String::from("stratum_id,treated,y1,y2\n");
    for i in 0..pairs {
        let a = ((i * 7919) % 13) as f64 / 13.0;
        let b = ((i * 104_729) % 17) as f64 / 17.0;
        writeln!(s, "p{i},1,{:.4},{:.4}", 0.8 + a, (0.6 + b) * scale).unwrap();
        writeln!(s, "p{i},0,{:.4},{:.4}", b, a * scale).unwrap();
    }
    let p = dir.join("study.csv");
    std::fs::write(&p, s).unwrap();
    p
}

fn data_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().skip(1).map(str::to_owned).collect()
}

fn header_of(path: &Path) -> Value {
    let text = std::fs::read_to_string(path).unwrap();
    let first = text.lines().next().unwrap();
    serde_json::from_str(first.strip_prefix("# ").expect("header comment")).unwrap()
}

#[test]
fn missing_input_exits_with_code_two() {
    let out = run(&["test", "/nonexistent/study.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn malformed_study_is_rejected() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("bad.csv");
    std::fs::write(&p, "id,arm,y1\np1,1,0.3\np1,0,0.1\n").unwrap();
    assert_eq!(run(&["test", p.to_str().unwrap()]).status.code(), Some(2));
    std::fs::write(&p, "stratum_id,treated,y1\np1,1,0.3\np1,1,0.1\n").unwrap();
    assert_eq!(run(&["test", p.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn dumped_study_reads_back_identically() {
    let dir = TempDir::new().unwrap();
    let csv = write_study(dir.path(), 30, 1.0);
    let dump = dir.path().join("study.json");
    let again = dir.path().join("again.json");
    let first = ok(&["test", csv.to_str().unwrap(), "--gamma", "1,1.5", "--dump-study", dump.to_str().unwrap()]);
    let second = ok(&["test", dump.to_str().unwrap(), "--gamma", "1,1.5", "--dump-study", again.to_str().unwrap()]);
    assert_eq!(std::fs::read_to_string(&dump).unwrap(), std::fs::read_to_string(&again).unwrap());
    let body = |o: &Output| serde_json::from_slice::<Value>(&o.stdout).unwrap()["body"].clone();
    assert_eq!(body(&first), body(&second));
}

#[test]
fn reports_carry_a_header() {
    let dir = TempDir::new().unwrap();
    let csv = write_study(dir.path(), 40, 1.0);
    let (json, table) = (dir.path().join("r.json"), dir.path().join("r.csv"));
    ok(&[
        "--seed",
        "5",
        "test",
        csv.to_str().unwrap(),
        "--gamma",
        "1,2",
        "--out-json",
        json.to_str().unwrap(),
        "--out-csv",
        table.to_str().unwrap(),
    ]);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["header"]["tool"], "mvsens");
    assert_eq!(v["header"]["seed"], 5);
    assert_eq!(v["header"]["command"], "test");
    assert_eq!(header_of(&table), v["header"]);
    // one header row plus one row per Gamma
    assert_eq!(data_lines(&table).len(), 3);
}

#[test]
fn strong_effects_reject_at_gamma_one() {
    let dir = TempDir::new().unwrap();
    let csv = write_study(dir.path(), 40, 1.0);
    let out = ok(&["test", csv.to_str().unwrap(), "--gamma", "1"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let text = v["body"].to_string();
    assert!(text.contains("\"reject\":true"), "{text}");
}

#[test]
fn mixed_scale_scores_warn_under_equal_weighting() {
    let dir = TempDir::new().unwrap();
    let csv = write_study(dir.path(), 20, 1.0);
    let scores = dir.path().join("scores.csv");
    let mut s = String::from("s1,s2\n");
    for i in 0..40 {
        let sign = if i % 2 == 0 { 1.0 } else { -0.5 };
        writeln!(s, "{},{}", sign * (1.0 + (i % 3) as f64), sign * 100.0 * (1.0 + (i % 5) as f64)).unwrap();
    }
    std::fs::write(&scores, s).unwrap();
    let args = |method: &'static str| {
        vec![
            "test".to_owned(),
            csv.to_str().unwrap().to_owned(),
            "--scores".into(),
            "file".into(),
            "--score-file".into(),
            scores.to_str().unwrap().to_owned(),
            "--method".into(),
            method.into(),
        ]
    };
    let equal: Vec<String> = args("equal-weight");
    let out = ok(&equal.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning:"));
    let chibar: Vec<String> = args("chibar");
    let out = ok(&chibar.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(!String::from_utf8_lossy(&out.stderr).contains("warning:"));
}

#[test]
fn simulation_output_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let scn = scenarios().join("tableA1.scn");
    let out = dir.path().join("sim.csv");
    let go = |seed: &str, threads: &str| {
        ok(&["--seed", seed, "--threads", threads, "simulate", scn.to_str().unwrap(), "--reps", "10", "--out-csv", out.to_str().unwrap()]);
        std::fs::read_to_string(&out).unwrap()
    };
    let a = go("3", "1");
    let b = go("3", "2");
    assert_eq!(a.lines().skip(1).collect::<Vec<_>>(), b.lines().skip(1).collect::<Vec<_>>());
    assert_eq!(go("3", "1"), a);
    // 6 cells x 3 methods x 1 Gamma
    assert_eq!(a.lines().count(), 2 + 18);
}

#[test]
fn wide_table_has_one_column_per_method() {
    let dir = TempDir::new().unwrap();
    let wide = dir.path().join("wide.csv");
    let scn = scenarios().join("tableA1.scn");
    ok(&["simulate", scn.to_str().unwrap(), "--reps", "5", "--wide-csv", wide.to_str().unwrap(), "--out-json", dir.path().join("s.json").to_str().unwrap()]);
    let lines = data_lines(&wide);
    let cols: Vec<&str> = lines[0].split(',').collect();
    for m in ["per-outcome-max", "chibar", "unconstrained"] {
        assert!(cols.iter().any(|c| c.contains(m)), "{cols:?}");
    }
    assert_eq!(lines.len(), 1 + 6);
}

#[test]
fn dist_commands_agree_with_closed_forms() {
    let value = |args: &[&str]| -> Value { serde_json::from_slice::<Value>(&ok(args).stdout).unwrap()["body"].clone() };
    let w = value(&["dist", "weights", "--corr", "1,0;0,1"]);
    let text = w.to_string();
    for expect in ["0.25", "0.5"] {
        assert!(text.contains(expect), "{text}");
    }
    // one outcome: the 0.95 quantile is the squared normal 0.95 quantile
    let q = value(&["dist", "quantile", "--k", "1", "--alpha", "0.05"]);
    let found = q.to_string();
    assert!(found.contains("2.705"), "{found}");
    let p = value(&["dist", "perlman", "--k", "3", "--alpha", "0.05"]);
    assert!(p.to_string().contains("quantile"), "{p}");
    assert_eq!(run(&["dist", "weights", "--corr", "1,2;2,1"]).status.code(), Some(2));
}
