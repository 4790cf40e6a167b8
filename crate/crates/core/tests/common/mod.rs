#![allow(dead_code)]

use mvsens::model::{huber_pair_scores, MatchedStudy, ScoreMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Random pair study: differences `tau + N(0, 1)` per outcome.
pub fn random_pair_scores(pairs: usize, k: usize, tau: f64, seed: u64) -> ScoreMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let diffs: Vec<Vec<f64>> = (0..pairs)
        .map(|_| (0..k).map(|_| tau + rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let study = MatchedStudy::from_pair_differences(&diffs).unwrap();
    huber_pair_scores(&study, 2.5).unwrap()
}

/// Signed coherent supremum for K = 2 by enumerating supports.
pub fn coherent_sup_k2(d: [f64; 2], s: [f64; 3]) -> f64 {
    let [a, b, c] = s;
    let det = a * c - b * b;
    let l1 = (c * d[0] - b * d[1]) / det;
    let l2 = (a * d[1] - b * d[0]) / det;
    if l1 > 0.0 && l2 > 0.0 {
        return (l1 * d[0] + l2 * d[1]).sqrt();
    }
    let r1 = d[0] / a.sqrt();
    let r2 = d[1] / c.sqrt();
    r1.max(r2)
}

/// Minimum of the surrogate `max(0, deviate)^2` over a per-pair grid of
/// `points` values of `rho_i1` spanning `[1/(1+G), G/(1+G)]` (vertices included).
pub fn brute_force_surrogate_k2(q: &ScoreMatrix<f64>, gamma: f64, points: usize) -> f64 {
    assert!(q.layout().all_pairs() && q.num_outcomes() == 2);
    let pairs = q.layout().num_strata();
    let lo = 1.0 / (1.0 + gamma);
    let hi = gamma / (1.0 + gamma);
    let levels = if gamma == 1.0 { 1 } else { points };
    // per pair, per level: (mu1, mu2, s11, s12, s22)
    let mut table = vec![[0.0f64; 5]; pairs * levels];
    for i in 0..pairs {
        let t = q.treated_positions()[i];
        let (u1, u2) = (2 * i, 2 * i + 1);
        let _ = t;
        for l in 0..levels {
            let p = if levels == 1 { 0.5 } else { lo + (hi - lo) * l as f64 / (levels - 1) as f64 };
            let x = q.row(u1);
            let y = q.row(u2);
            let m = [p * x[0] + (1.0 - p) * y[0], p * x[1] + (1.0 - p) * y[1]];
            table[i * levels + l] = [
                m[0],
                m[1],
                p * x[0] * x[0] + (1.0 - p) * y[0] * y[0] - m[0] * m[0],
                p * x[0] * x[1] + (1.0 - p) * y[0] * y[1] - m[0] * m[1],
                p * x[1] * x[1] + (1.0 - p) * y[1] * y[1] - m[1] * m[1],
            ];
        }
    }
    let t = q.observed();
    let mut idx = vec![0usize; pairs];
    let mut acc = [0.0f64; 5];
    for i in 0..pairs {
        for c in 0..5 {
            acc[c] += table[i * levels][c];
        }
    }
    let mut best = f64::INFINITY;
    loop {
        let v = coherent_sup_k2([t[0] - acc[0], t[1] - acc[1]], [acc[2], acc[3], acc[4]]);
        let b = v.max(0.0).powi(2);
        if b < best {
            best = b;
        }
        // odometer step
        let mut i = 0;
        loop {
            if i == pairs {
                return best;
            }
            let old = idx[i];
            let new = if old + 1 == levels { 0 } else { old + 1 };
            for c in 0..5 {
                acc[c] += table[i * levels + new][c] - table[i * levels + old][c];
            }
            idx[i] = new;
            if new != 0 {
                break;
            }
            i += 1;
        }
    }
}
