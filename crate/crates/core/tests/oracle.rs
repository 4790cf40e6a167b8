mod common;

use common::*;
use mvsens::feasible::is_member;
use mvsens::game::{coherent_sup, solve_worst_case, GameOptions, LambdaSpec};
use mvsens::feasible::compute_moments;
use mvsens::oracle::{
    biased_probs, exact_statistic_distribution, exact_worst_case_pvalue, pvalue_at_u, unit_probs_from_assignment_dist, AssignmentSpace,
    ConfounderVector, Statistic,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn biased_marginals_lie_in_the_polytope() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..10u64 {
        let q = random_pair_scores(5, 2, 0.3, seed);
        let space = AssignmentSpace::new(q.layout()).unwrap();
        let gamma = rng.random_range(1.0..4.0);
        let u = ConfounderVector::new((0..q.num_units()).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let dist = biased_probs(&space, &u, gamma).unwrap();
        assert!((dist.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let rho = unit_probs_from_assignment_dist(&dist);
        assert!(is_member(q.layout(), rho.as_slice(), gamma));
    }
}

#[test]
fn worst_case_deviate_is_below_every_confounder() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..10u64 {
        let q = random_pair_scores(6, 2, 0.8, 50 + seed);
        let space = AssignmentSpace::new(q.layout()).unwrap();
        let t = q.observed();
        for gamma in [1.5, 3.0] {
            let a = solve_worst_case(&q, gamma, &LambdaSpec::Cone, &GameOptions::default()).unwrap().a_star;
            for _ in 0..20 {
                let u = ConfounderVector::new((0..q.num_units()).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
                let rho = unit_probs_from_assignment_dist(&biased_probs(&space, &u, gamma).unwrap());
                let m = compute_moments(&q, rho.as_slice());
                let d: Vec<f64> = t.iter().zip(&m.mu).map(|(a, b)| a - b).collect();
                let at_u = coherent_sup(&d, &m.sigma).unwrap().value;
                assert!(a.max(0.0) <= at_u.max(0.0) + 1e-6, "seed {seed} gamma {gamma}: {a} > {at_u}");
            }
        }
    }
}

#[test]
fn vertex_search_dominates_interior_confounders() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let stat = Statistic::Linear { lambda: vec![1.0, 1.0] };
    for seed in 0..5u64 {
        let q = random_pair_scores(5, 2, 0.4, 80 + seed);
        let worst = exact_worst_case_pvalue(&q, 2.0, &stat).unwrap().pvalue;
        for _ in 0..10 {
            let u = ConfounderVector::new((0..q.num_units()).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
            assert!(pvalue_at_u(&q, &u, 2.0, &stat).unwrap() <= worst + 1e-12);
        }
    }
}

#[test]
fn gamma_one_distribution_is_uniform_over_assignments() {
    let q = random_pair_scores(4, 2, 0.0, 9);
    let space = AssignmentSpace::new(q.layout()).unwrap();
    assert_eq!(space.size(), 16);
    let d = exact_statistic_distribution(&q, &mvsens::oracle::uniform_dist(&space), &Statistic::PerOutcome { k: 0 }).unwrap();
    assert!((d.total_mass() - 1.0).abs() < 1e-14);
    // a pair statistic is symmetric about zero under the sharp null
    for (v, p) in d.values.iter().zip(&d.probs) {
        let mirror = d.values.iter().position(|w| (w + v).abs() < 1e-12).unwrap();
        assert!((d.probs[mirror] - p).abs() < 1e-14);
    }
}
