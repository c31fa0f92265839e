//! Dense matrices sized for this problem class (n <= ~10).
//!
//! `Mat<T>` is generic over the `Real` scalar so Gaussian elimination can
//! run on dual numbers, propagating exact derivatives through linear
//! solves (pivoting decisions are made on real parts, which is valid for
//! derivatives as long as the pivot pattern is locally stable). SVD-grade
//! operations (pseudoinverse, condition estimates, rank) stay on `f64`
//! and are delegated to nalgebra.

use crate::error::{Error, Result};
use crate::expr::Real;
use nalgebra::DMatrix;

/// Singular values below `RANK_CUTOFF * sigma_max` are treated as zero.
pub const RANK_CUTOFF: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Mat {
            rows: r,
            cols: c,
            data: rows.into_iter().flatten().collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat<T> {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, other.rows, "shape mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                for j in 0..other.cols {
                    out[(i, j)] = out[(i, j)] + a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len(), "shape mismatch");
        (0..self.rows)
            .map(|i| {
                let mut acc = T::zero();
                for j in 0..self.cols {
                    acc = acc + self[(i, j)] * v[j];
                }
                acc
            })
            .collect()
    }

    /// v^T M, as a vector of length `cols`.
    pub fn tmul_vec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.rows, v.len(), "shape mismatch");
        (0..self.cols)
            .map(|j| {
                let mut acc = T::zero();
                for i in 0..self.rows {
                    acc = acc + v[i] * self[(i, j)];
                }
                acc
            })
            .collect()
    }

    pub fn scale(&self, s: T) -> Mat<T> {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = *v * s;
        }
        out
    }

    pub fn sub(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut out = self.clone();
        for (v, o) in out.data.iter_mut().zip(&other.data) {
            *v = *v - *o;
        }
        out
    }

    /// Max absolute value of the real parts.
    pub fn norm_inf(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.value().abs())
            .fold(0.0, f64::max)
    }

    pub fn map_value(&self) -> Mat<f64> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.value()).collect(),
        }
    }

    /// Solve `self * X = B` by LU with partial pivoting on real-part
    /// magnitude. `B` may have several columns.
    pub fn solve(&self, b: &Mat<T>) -> Result<Mat<T>> {
        assert_eq!(self.rows, self.cols, "solve needs a square matrix");
        assert_eq!(self.rows, b.rows, "shape mismatch");
        let n = self.rows;
        let m = b.cols;
        let mut a = self.clone();
        let mut x = b.clone();
        for col in 0..n {
            let mut pivot = col;
            let mut best = a[(col, col)].value().abs();
            for r in col + 1..n {
                let cand = a[(r, col)].value().abs();
                if cand > best {
                    best = cand;
                    pivot = r;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return Err(Error::SingularConsistency { cond: f64::INFINITY });
            }
            if pivot != col {
                for j in 0..n {
                    a.data.swap(col * n + j, pivot * n + j);
                }
                for j in 0..m {
                    x.data.swap(col * m + j, pivot * m + j);
                }
            }
            let diag = a[(col, col)];
            for r in col + 1..n {
                let factor = a[(r, col)] / diag;
                a[(r, col)] = T::zero();
                for j in col + 1..n {
                    a[(r, j)] = a[(r, j)] - factor * a[(col, j)];
                }
                for j in 0..m {
                    x[(r, j)] = x[(r, j)] - factor * x[(col, j)];
                }
            }
        }
        for col in (0..n).rev() {
            let diag = a[(col, col)];
            for j in 0..m {
                let mut acc = x[(col, j)];
                for k in col + 1..n {
                    acc = acc - a[(col, k)] * x[(k, j)];
                }
                x[(col, j)] = acc / diag;
            }
        }
        Ok(x)
    }

    pub fn solve_vec(&self, b: &[T]) -> Result<Vec<T>> {
        let bm = Mat {
            rows: b.len(),
            cols: 1,
            data: b.to_vec(),
        };
        Ok(self.solve(&bm)?.data)
    }
}

impl<T> std::ops::Index<(usize, usize)> for Mat<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Mat<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

fn to_na(m: &Mat<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn from_na(m: &DMatrix<f64>) -> Mat<f64> {
    let mut out = Mat::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out[(i, j)] = m[(i, j)];
        }
    }
    out
}

/// Moore-Penrose pseudoinverse with singular values below
/// `RANK_CUTOFF * sigma_max` zeroed.
pub fn pseudo_inverse(m: &Mat<f64>) -> Mat<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Mat::zeros(m.ncols(), m.nrows());
    }
    let na = to_na(m);
    let svd = na.svd(true, true);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if sigma_max == 0.0 {
        return Mat::zeros(m.ncols(), m.nrows());
    }
    let pinv = svd
        .pseudo_inverse(RANK_CUTOFF * sigma_max)
        .expect("svd computed");
    from_na(&pinv)
}

/// 2-norm condition estimate sigma_max / sigma_min; infinite when rank
/// deficient under the cutoff.
pub fn condition(m: &Mat<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 1.0;
    }
    let na = to_na(m);
    let svd = na.svd(false, false);
    let max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let min = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if min <= RANK_CUTOFF * max {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Numerical row rank under the cutoff.
pub fn rank(m: &Mat<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let svd = to_na(m).svd(false, false);
    let max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    svd.singular_values
        .iter()
        .filter(|s| **s > RANK_CUTOFF * max)
        .count()
}

/// Minimum-norm least-squares solution of `A x = b` (x = A^+ b).
pub fn lstsq_min_norm(a: &Mat<f64>, b: &[f64]) -> Vec<f64> {
    pseudo_inverse(a).mul_vec(b)
}

/// Inverse square root of a symmetric positive-definite matrix, or
/// `None` when an eigenvalue sits at or below the rank cutoff.
pub fn sym_inv_sqrt(m: &Mat<f64>) -> Option<Mat<f64>> {
    let n = m.nrows();
    assert_eq!(n, m.ncols());
    let eig = to_na(m).symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return None;
    }
    let mut out = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                let ev = eig.eigenvalues[k];
                if ev <= RANK_CUTOFF * max {
                    return None;
                }
                acc += eig.eigenvectors[(i, k)] * eig.eigenvectors[(j, k)] / ev.sqrt();
            }
            out[(i, j)] = acc;
        }
    }
    Some(out)
}

pub fn vec_norm_inf(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).fold(0.0, f64::max)
}
