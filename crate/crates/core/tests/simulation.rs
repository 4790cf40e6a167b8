use mvsens::game::{solve_worst_case, GameOptions, LambdaSpec};
use mvsens::inference::{InferenceOptions, Method};
use mvsens::model::huber_pair_scores;
use mvsens::simulation::{design_sensitivity_estimate, generate_paired_data, parse_scenarios, power_curve, DesignOptions, SimScenario};

fn scenario(tau: Vec<f64>, pairs: usize, gammas: Vec<f64>, replicates: usize) -> SimScenario {
    SimScenario {
        label: "t".into(),
        pairs,
        outcomes: tau.len(),
        tau,
        rho: 0.0,
        kappa: 2.5,
        methods: vec![Method::Chibar, Method::EqualWeight, Method::PerOutcomeMax],
        gammas,
        alpha: 0.05,
        replicates,
        seed: 17,
    }
}

#[test]
fn power_tables_are_reproducible_and_thread_independent() {
    let scn = scenario(vec![0.3, 0.1, 0.4], 60, vec![1.0, 1.5, 2.0, 2.5], 24);
    let opts = InferenceOptions::default();
    let a = power_curve(&scn, &opts).unwrap().csv_rows();
    let b = power_curve(&scn, &opts).unwrap().csv_rows();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let c = single.install(|| power_curve(&scn, &opts).unwrap().csv_rows());
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn power_falls_with_gamma_and_vanishes_beyond_design_sensitivity() {
    let scn = scenario(vec![0.25, 0.25, 0.25], 150, vec![1.0, 1.5, 2.0, 2.5, 3.0, 6.0], 60);
    let t = power_curve(&scn, &InferenceOptions::default()).unwrap();
    for m in ["chibar", "equal-weight", "per-outcome-max"] {
        let curve: Vec<(f64, f64)> = scn.gammas.iter().map(|&g| {
            let r = t.row(m, g).unwrap();
            (r.power, r.se)
        }).collect();
        for w in curve.windows(2) {
            assert!(w[1].0 <= w[0].0 + 3.0 * w[0].1.max(w[1].1) + 1e-12, "{m}: {curve:?}");
        }
        let (p, _) = curve[curve.len() - 1];
        assert!(p <= 0.05 + 3.0 * (0.05f64 * 0.95 / 60.0).sqrt(), "{m} at Gamma 6: {p}");
    }
}

/// Largest Gamma on a 1e-3 bracket at which the worst-case deviate is still positive.
fn bisect_sign(q: &mvsens::Scores, spec: &LambdaSpec<f64>) -> f64 {
    let positive = |g: f64| solve_worst_case(q, g, spec, &GameOptions::default()).unwrap().a_star > 0.0;
    let (mut lo, mut hi) = (1.0, 2.0);
    while positive(hi) {
        lo = hi;
        hi *= 2.0;
    }
    while hi - lo > 1e-3 {
        let mid = 0.5 * (lo + hi);
        if positive(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn design_ratio_matches_deviate_sign_bisection() {
    let scn = scenario(vec![0.1, 0.3, 0.5], 400, vec![1.0], 1);
    let opts = DesignOptions { pairs: 400, seeds: 1, grid: 20 };
    let q = huber_pair_scores(&generate_paired_data(&SimScenario { pairs: 400, ..scn.clone() }, 0).unwrap(), 2.5).unwrap();
    let cone = design_sensitivity_estimate(&scn, &Method::Chibar, &opts).unwrap().estimate;
    assert!((cone - bisect_sign(&q, &LambdaSpec::Cone)).abs() < 5e-3);
    let equal = design_sensitivity_estimate(&scn, &Method::EqualWeight, &opts).unwrap().estimate;
    assert!((equal - bisect_sign(&q, &LambdaSpec::equal_weight(3))).abs() < 5e-3);
    // the max-univariate value is the largest single-outcome crossing, which only
    // lower-bounds the crossing of the joint per-outcome game
    let univariate = design_sensitivity_estimate(&scn, &Method::PerOutcomeMax, &opts).unwrap().estimate;
    let single = (0..3)
        .map(|k| {
            let mut e = vec![0.0; 3];
            e[k] = 1.0;
            bisect_sign(&q, &LambdaSpec::Finite(vec![e]))
        })
        .fold(0.0, f64::max);
    assert!((univariate - single).abs() < 5e-3, "ratio {univariate} vs bisection {single}");
    assert!(bisect_sign(&q, &LambdaSpec::per_outcome(3)) >= univariate - 5e-3);
    assert!(cone >= equal.max(univariate) - 5e-3);
}

#[test]
fn scenario_cells_inherit_and_override() {
    let text = r#"
        name = "demo"
        pairs = 30
        outcomes = 2
        tau = [0.2, 0.1]
        methods = ["chibar", "equal-weight"]
        gammas = [1.0, 1.5]
        replicates = 5

        [[cells]]
        label = "a"

        [[cells]]
        label = "b"
        rho = 0.4
        pairs = 50
    "#;
    let v = parse_scenarios(text).unwrap();
    assert_eq!(v.len(), 2);
    assert_eq!(v[0].label, "demo/a");
    assert_eq!((v[1].pairs, v[1].rho), (50, 0.4));
    assert_eq!(v[1].tau, vec![0.2, 0.1]);
    assert!(parse_scenarios("name = \"x\"\nbogus = 1\n").is_err());
}
