//! Dense column-major complex matrices and the handful of kernels the solvers need.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

/// Dense complex matrix stored column by column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = ONE;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for j in 0..cols {
            for i in 0..rows {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_col_major(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                what: "matrix storage",
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Entries are i.i.d. standard complex normal (unit variance, split evenly
    /// between real and imaginary parts).
    pub fn random_normal(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Self {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        Self::from_fn(rows, cols, |_, _| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            C64::new(re * s, im * s)
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    #[inline]
    pub fn column(&self, j: usize) -> &[C64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    #[inline]
    pub fn column_mut(&mut self, j: usize) -> &mut [C64] {
        let r = self.rows;
        &mut self.data[j * r..(j + 1) * r]
    }

    /// Columns `[start, start + len)` as a new matrix.
    pub fn columns(&self, start: usize, len: usize) -> CMatrix {
        CMatrix {
            rows: self.rows,
            cols: len,
            data: self.data[start * self.rows..(start + len) * self.rows].to_vec(),
        }
    }

    pub fn adjoint(&self) -> CMatrix {
        CMatrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn scale(&self, s: C64) -> CMatrix {
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &CMatrix) -> CMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &CMatrix) -> CMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    /// `self * x`.
    pub fn mul_vec(&self, x: &[C64]) -> Vec<C64> {
        assert_eq!(x.len(), self.cols, "matvec dimension");
        let mut out = vec![ZERO; self.rows];
        for (j, &xj) in x.iter().enumerate() {
            if xj == ZERO {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.column(j)) {
                *o += a * xj;
            }
        }
        out
    }

    /// `self^H * y`.
    pub fn adjoint_mul_vec(&self, y: &[C64]) -> Vec<C64> {
        assert_eq!(y.len(), self.rows, "adjoint matvec dimension");
        (0..self.cols).map(|j| dot_h(self.column(j), y)).collect()
    }

    /// `self * other`.
    pub fn matmul(&self, other: &CMatrix) -> CMatrix {
        assert_eq!(self.cols, other.rows, "matmul dimension");
        let mut out = CMatrix::zeros(self.rows, other.cols);
        for j in 0..other.cols {
            let col = self.mul_vec(other.column(j));
            out.column_mut(j).copy_from_slice(&col);
        }
        out
    }

    /// `self^H * other`.
    pub fn adjoint_matmul(&self, other: &CMatrix) -> CMatrix {
        assert_eq!(self.rows, other.rows, "adjoint matmul dimension");
        CMatrix::from_fn(self.cols, other.cols, |i, j| {
            dot_h(self.column(i), other.column(j))
        })
    }

    /// Accumulates `alpha * u v^H` into `self`.
    pub fn add_outer(&mut self, alpha: C64, u: &[C64], v: &[C64]) {
        assert_eq!(u.len(), self.rows);
        assert_eq!(v.len(), self.cols);
        for (j, vj) in v.iter().enumerate() {
            let c = alpha * vj.conj();
            if c == ZERO {
                continue;
            }
            for (m, ui) in self.column_mut(j).iter_mut().zip(u) {
                *m += ui * c;
            }
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm2(&self.data)
    }

    /// Largest singular value via power iteration on `A^H A`, started from a
    /// seeded Gaussian vector.
    pub fn spectral_norm(&self) -> f64 {
        if self.rows == 0 || self.cols == 0 {
            return 0.0;
        }
        if self.cols == 1 {
            return norm2(&self.data);
        }
        if self.rows == 1 {
            return norm2(&self.data);
        }
        let gram = self.adjoint_matmul(self);
        let lambda = hermitian_top_eigenvalue(
            |v| gram.mul_vec(v),
            gram.rows,
            0x5eed,
            1e-13,
            20_000,
        )
        .unwrap_or_else(|(_, last)| last);
        lambda.max(0.0).sqrt()
    }
}

impl std::ops::Index<(usize, usize)> for CMatrix {
    type Output = C64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.data[j * self.rows + i]
    }
}

impl std::ops::IndexMut<(usize, usize)> for CMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.data[j * self.rows + i]
    }
}

/// `a^H b`.
#[inline]
pub fn dot_h(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

#[inline]
pub fn norm2_sqr(v: &[C64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum()
}

#[inline]
pub fn norm2(v: &[C64]) -> f64 {
    norm2_sqr(v).sqrt()
}

pub fn sub(a: &[C64], b: &[C64]) -> Vec<C64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn random_complex_normal(n: usize, rng: &mut impl rand::Rng) -> Vec<C64> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    (0..n)
        .map(|_| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            C64::new(re * s, im * s)
        })
        .collect()
}

/// Power iteration for the top eigenvalue of a positive semidefinite Hermitian
/// operator from a seeded random start. Stops when the Rayleigh quotient
/// changes by less than `rel_tol` relative. On failure returns
/// `(iterations, last_estimate)`.
pub fn hermitian_top_eigenvalue(
    apply: impl Fn(&[C64]) -> Vec<C64>,
    dim: usize,
    seed: u64,
    rel_tol: f64,
    max_iters: usize,
) -> std::result::Result<f64, (usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    hermitian_top_eigenvalue_from(apply, random_complex_normal(dim, &mut rng), rel_tol, max_iters)
}

/// As [`hermitian_top_eigenvalue`] from a given nonzero start vector.
pub fn hermitian_top_eigenvalue_from(
    apply: impl Fn(&[C64]) -> Vec<C64>,
    start: Vec<C64>,
    rel_tol: f64,
    max_iters: usize,
) -> std::result::Result<f64, (usize, f64)> {
    let mut v = start;
    let n = norm2(&v);
    if n == 0.0 {
        return Err((0, 0.0));
    }
    v.iter_mut().for_each(|c| *c /= n);
    let mut lambda = 0.0;
    for it in 0..max_iters {
        let w = apply(&v);
        let next = dot_h(&v, &w).re;
        let wn = norm2(&w);
        if wn == 0.0 {
            return Ok(0.0);
        }
        v = w.into_iter().map(|c| c / wn).collect();
        if it > 0 && (next - lambda).abs() <= rel_tol * next.abs() {
            return Ok(next);
        }
        lambda = next;
    }
    Err((max_iters, lambda))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_and_adjoint_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = CMatrix::random_normal(4, 6, &mut rng);
        let x = random_complex_normal(6, &mut rng);
        let y = random_complex_normal(4, &mut rng);
        // <y, A x> = <A^H y, x>
        let lhs = dot_h(&y, &a.mul_vec(&x));
        let rhs = dot_h(&a.adjoint_mul_vec(&y), &x);
        assert!((lhs - rhs).norm() < 1e-12);
        let ah = a.adjoint();
        assert_eq!(ah.mul_vec(&y), a.adjoint_mul_vec(&y));
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let mut m = CMatrix::zeros(3, 3);
        m[(0, 0)] = C64::new(0.5, 0.0);
        m[(1, 1)] = C64::new(0.0, -2.0);
        m[(2, 2)] = C64::new(1.0, 1.0);
        assert!((m.spectral_norm() - 2.0).abs() < 1e-10);
    }

    #[test]
    fn outer_product_accumulates() {
        let mut m = CMatrix::zeros(2, 2);
        let u = [C64::new(1.0, 0.0), C64::new(0.0, 1.0)];
        let v = [C64::new(0.0, 1.0), C64::new(2.0, 0.0)];
        m.add_outer(ONE, &u, &v);
        assert_eq!(m[(1, 0)], u[1] * v[0].conj());
        assert_eq!(m[(0, 1)], u[0] * v[1].conj());
    }
}
