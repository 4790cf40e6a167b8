//! Small dense symmetric matrices.
//!
//! Outcome counts are small (K rarely exceeds ten), so everything here is a
//! plain row-major `Vec` with O(K^3) factorizations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix<T> {
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> SymMatrix<T> {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, data: vec![T::zero(); dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.set(i, i, T::one());
        }
        m
    }

    /// Builds from rows, symmetrizing as `(A + A') / 2`.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Dimension("matrix rows must all have length K".into()));
        }
        let half = T::lit(0.5);
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                m.data[i * dim + j] = (rows[i][j] + rows[j][i]) * half;
            }
        }
        Ok(m)
    }

    /// Equicorrelation matrix with unit diagonal.
    pub fn equicorrelation(dim: usize, rho: T) -> Self {
        let mut m = Self::identity(dim);
        for i in 0..dim {
            for j in 0..dim {
                if i != j {
                    m.data[i * dim + j] = rho;
                }
            }
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.dim + j]
    }

    /// Sets both `(i, j)` and `(j, i)`.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.dim + j] = v;
        self.data[j * self.dim + i] = v;
    }

    #[inline]
    pub fn add_to(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.dim + j] = self.data[i * self.dim + j] + v;
        if i != j {
            self.data[j * self.dim + i] = self.data[j * self.dim + i] + v;
        }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn rows(&self) -> Vec<Vec<T>> {
        self.data.chunks(self.dim).map(|r| r.to_vec()).collect()
    }

    pub fn trace(&self) -> T {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.dim);
        self.data
            .chunks(self.dim)
            .map(|row| row.iter().zip(x).map(|(&a, &b)| a * b).sum())
            .collect()
    }

    /// `x' A x`
    pub fn quad_form(&self, x: &[T]) -> T {
        dot(x, &self.mul_vec(x))
    }

    pub fn submatrix(&self, idx: &[usize]) -> Self {
        let mut m = Self::zeros(idx.len());
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                m.data[a * idx.len() + b] = self.get(i, j);
            }
        }
        m
    }

    pub fn add_ridge(&mut self, ridge: T) {
        for i in 0..self.dim {
            self.data[i * self.dim + i] = self.data[i * self.dim + i] + ridge;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cholesky(&self) -> Option<Cholesky<T>> {
        Cholesky::new(self)
    }

    pub fn inverse(&self) -> Result<Self> {
        let chol = self
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("cholesky failed".into()))?;
        let mut inv = Self::zeros(self.dim);
        let mut e = vec![T::zero(); self.dim];
        for j in 0..self.dim {
            e.iter_mut().for_each(|v| *v = T::zero());
            e[j] = T::one();
            let col = chol.solve(&e);
            for i in 0..self.dim {
                inv.data[i * self.dim + j] = col[i];
            }
        }
        // symmetrize away rounding
        let half = T::lit(0.5);
        for i in 0..self.dim {
            for j in (i + 1)..self.dim {
                let v = (inv.get(i, j) + inv.get(j, i)) * half;
                inv.set(i, j, v);
            }
        }
        Ok(inv)
    }

    /// Correlation matrix `D^{-1/2} A D^{-1/2}`; errors if a diagonal entry is not positive.
    pub fn to_correlation(&self) -> Result<Self> {
        let mut sd = Vec::with_capacity(self.dim);
        for i in 0..self.dim {
            let v = self.get(i, i);
            if !(v > T::zero()) {
                return Err(Error::DegenerateVariance { outcome: i });
            }
            sd.push(v.sqrt());
        }
        let mut c = Self::identity(self.dim);
        for i in 0..self.dim {
            for j in (i + 1)..self.dim {
                let r = self.get(i, j) / (sd[i] * sd[j]);
                c.set(i, j, r.max(-T::one()).min(T::one()));
            }
        }
        Ok(c)
    }

    /// Eigen-decomposition by cyclic Jacobi rotations.
    ///
    /// Returns eigenvalues (ascending) and the matching eigenvectors as columns
    /// of a row-major `dim x dim` buffer.
    pub fn symmetric_eigen(&self) -> (Vec<T>, Vec<T>) {
        let n = self.dim;
        let mut a = self.data.clone();
        let mut v = vec![T::zero(); n * n];
        for i in 0..n {
            v[i * n + i] = T::one();
        }
        let two = T::lit(2.0);
        for _sweep in 0..100 {
            let mut off = T::zero();
            for i in 0..n {
                for j in (i + 1)..n {
                    off = off + a[i * n + j] * a[i * n + j];
                }
            }
            let scale: T = (0..n).map(|i| a[i * n + i] * a[i * n + i]).sum::<T>() + off;
            if off <= T::epsilon() * T::epsilon() * scale || off == T::zero() {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[p * n + q];
                    if apq == T::zero() {
                        continue;
                    }
                    let theta = (a[q * n + q] - a[p * n + p]) / (two * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                    let c = T::one() / (t * t + T::one()).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k * n + p];
                        let akq = a[k * n + q];
                        a[k * n + p] = c * akp - s * akq;
                        a[k * n + q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p * n + k];
                        let aqk = a[q * n + k];
                        a[p * n + k] = c * apk - s * aqk;
                        a[q * n + k] = s * apk + c * aqk;
                    }
                    for k in 0..n {
                        let vkp = v[k * n + p];
                        let vkq = v[k * n + q];
                        v[k * n + p] = c * vkp - s * vkq;
                        v[k * n + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| a[i * n + i].partial_cmp(&a[j * n + j]).unwrap_or(std::cmp::Ordering::Equal));
        let vals: Vec<T> = order.iter().map(|&i| a[i * n + i]).collect();
        let mut vecs = vec![T::zero(); n * n];
        for (new, &old) in order.iter().enumerate() {
            for k in 0..n {
                vecs[k * n + new] = v[k * n + old];
            }
        }
        (vals, vecs)
    }

    pub fn min_eigenvalue(&self) -> T {
        if self.dim == 0 {
            return T::zero();
        }
        self.symmetric_eigen().0[0]
    }

    /// Rebuilds `V diag(max(lambda, floor)) V'`.
    pub fn clip_eigenvalues(&self, floor: T) -> Self {
        let n = self.dim;
        let (vals, vecs) = self.symmetric_eigen();
        let mut out = Self::zeros(n);
        for i in 0..n {
            for j in i..n {
                let mut s = T::zero();
                for k in 0..n {
                    s = s + vecs[i * n + k] * vals[k].max(floor) * vecs[j * n + k];
                }
                out.set(i, j, s);
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    dim: usize,
    /// lower-triangular factor, row-major
    l: Vec<T>,
}

impl<T: Scalar> Cholesky<T> {
    pub fn new(a: &SymMatrix<T>) -> Option<Self> {
        let n = a.dim;
        let mut l = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s = s - l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if !(s > T::zero()) {
                        return None;
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Some(Self { dim: n, l })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `L x`
    pub fn lower_mul(&self, x: &[T]) -> Vec<T> {
        let n = self.dim;
        (0..n)
            .map(|i| (0..=i).map(|k| self.l[i * n + k] * x[k]).sum())
            .collect()
    }

    /// Writes `L x` into `out` without allocating.
    pub fn lower_mul_into(&self, x: &[T], out: &mut [T]) {
        let n = self.dim;
        for i in 0..n {
            let mut s = T::zero();
            for k in 0..=i {
                s = s + self.l[i * n + k] * x[k];
            }
            out[i] = s;
        }
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.dim;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s = s - self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s = s - self.l[k * n + i] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        y
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[inline]
pub fn norm2<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}
