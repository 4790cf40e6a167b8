//! Quadratic programming over the nonnegative orthant.
//!
//! Solves `min 1/2 x' S x - x' d` subject to `x >= 0` for a positive-definite
//! `S` with the Lawson-Hanson active-set iteration, which only touches the
//! data through `S` and `d`. Terminates finitely with an exact KKT point up
//! to rounding.

use crate::linalg::{dot, SymMatrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct ConeSolution<T> {
    /// Optimal `x`; zero outside the passive set.
    pub x: Vec<T>,
    /// `x' d`, which equals `x' S x` at the optimum.
    pub value_sq: T,
    pub iterations: usize,
}

/// Solves `min_{x >= 0} 1/2 x' S x - x' d`.
pub fn solve_nonneg_qp<T: Scalar>(s: &SymMatrix<T>, d: &[T]) -> ConeSolution<T> {
    let k = d.len();
    debug_assert_eq!(s.dim(), k);
    let scale = d.iter().fold(T::zero(), |m, v| m.max(v.abs())).max(T::min_positive_value());
    let tol = T::tol(1e-13) * scale * T::from_usize(k.max(1)).unwrap();
    let mut x = vec![T::zero(); k];
    let mut passive = vec![false; k];
    let max_outer = 3 * k + 10;
    let mut iterations = 0;

    for _ in 0..max_outer {
        let grad = gradient(s, d, &x);
        let entering = (0..k)
            .filter(|&j| !passive[j])
            .max_by(|&a, &b| grad[a].partial_cmp(&grad[b]).unwrap())
            .filter(|&j| grad[j] > tol);
        let Some(j) = entering else { break };
        passive[j] = true;

        loop {
            iterations += 1;
            let idx: Vec<usize> = (0..k).filter(|&j| passive[j]).collect();
            let z = solve_sub(s, d, &idx);
            if z.iter().all(|&v| v > T::zero()) {
                for (&i, &v) in idx.iter().zip(&z) {
                    x[i] = v;
                }
                break;
            }
            // step toward z until the first passive coordinate hits zero
            let mut alpha = T::one();
            let mut blocking = None;
            for (&i, &zi) in idx.iter().zip(&z) {
                if zi <= T::zero() {
                    let denom = x[i] - zi;
                    let a = if denom > T::zero() { x[i] / denom } else { T::zero() };
                    if blocking.is_none() || a < alpha {
                        alpha = a;
                        blocking = Some(i);
                    }
                }
            }
            for (&i, &zi) in idx.iter().zip(&z) {
                x[i] = x[i] + alpha * (zi - x[i]);
            }
            if let Some(b) = blocking {
                x[b] = T::zero();
                passive[b] = false;
            }
            for &i in &idx {
                if passive[i] && x[i] <= T::zero() {
                    x[i] = T::zero();
                    passive[i] = false;
                }
            }
            if !passive.iter().any(|&p| p) || iterations > 50 * (k + 1) {
                break;
            }
        }
    }
    let value_sq = dot(&x, d).max(T::zero());
    ConeSolution { x, value_sq, iterations }
}

fn gradient<T: Scalar>(s: &SymMatrix<T>, d: &[T], x: &[T]) -> Vec<T> {
    let sx = s.mul_vec(x);
    d.iter().zip(sx).map(|(&a, b)| a - b).collect()
}

/// Solves `S_PP z = d_P` by Cholesky on the passive block.
fn solve_sub<T: Scalar>(s: &SymMatrix<T>, d: &[T], idx: &[usize]) -> Vec<T> {
    let sub = s.submatrix(idx);
    let rhs: Vec<T> = idx.iter().map(|&i| d[i]).collect();
    match sub.cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => {
            let mut r = sub.clone();
            r.add_ridge(T::tol(1e-12) * sub.trace().max(T::min_positive_value()));
            r.cholesky().map(|c| c.solve(&rhs)).unwrap_or_else(|| vec![T::zero(); idx.len()])
        }
    }
}
