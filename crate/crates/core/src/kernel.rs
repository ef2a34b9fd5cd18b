//! Domain types, Gaussian kernel evaluation and the exact O(n²d) oracles.
//!
//! The kernel is `k(p, q) = exp(-‖p - q‖² / (2σ²))`. Every estimator in the
//! crate is checked against [`exact_matvec`] and [`materialize`].

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_param, Error, Result};

/// Largest `n` for which [`materialize`] will build a dense matrix by default.
pub const DEFAULT_ORACLE_CAP: usize = 8192;

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of all entries in row-major order.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Top-left `rows × cols` block.
    pub fn prefix(&self, rows: usize, cols: usize) -> Matrix {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            data.extend_from_slice(&self.row(i)[..cols]);
        }
        Matrix { rows, cols, data }
    }
}

/// An `n × d` set of points (keys or queries), all coordinates finite.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    data: Matrix,
}

impl PointSet {
    pub fn new(data: Matrix) -> Result<Self> {
        if data.rows() == 0 {
            return Err(Error::Empty("point set has no points"));
        }
        if data.cols() == 0 {
            return Err(Error::Empty("point set has zero dimension"));
        }
        if !data.is_finite() {
            return Err(Error::NonFinite("point set"));
        }
        Ok(Self { data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    /// Number of points.
    pub fn n(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        self.data.row(i)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.data
    }

    pub fn into_matrix(self) -> Matrix {
        self.data
    }

    /// The points with the given indices, in order.
    pub fn select(&self, indices: &[usize]) -> Result<PointSet> {
        let mut data = Vec::with_capacity(indices.len() * self.dim());
        for &i in indices {
            data.extend_from_slice(self.point(i));
        }
        PointSet::new(Matrix::new(indices.len(), self.dim(), data)?)
    }

    /// The first `len` points.
    pub fn prefix(&self, len: usize) -> Result<PointSet> {
        if len == 0 || len > self.n() {
            return Err(Error::OutOfRange {
                t: len,
                max: self.n(),
            });
        }
        PointSet::new(self.data.prefix(len, self.dim()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.n()).map(move |i| self.point(i))
    }
}

/// Gaussian kernel with bandwidth σ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianKernel {
    sigma: f64,
}

impl GaussianKernel {
    pub fn new(sigma: f64) -> Result<Self> {
        check_param(
            "sigma",
            sigma,
            sigma.is_finite() && sigma > 0.0,
            "bandwidth must be positive and finite",
        )?;
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// The kernel whose values are the squares of this one's: bandwidth σ/√2.
    pub fn squared(&self) -> GaussianKernel {
        GaussianKernel {
            sigma: self.sigma / std::f64::consts::SQRT_2,
        }
    }

    #[inline]
    pub fn from_sq_dist(&self, sq_dist: f64) -> f64 {
        (-sq_dist / (2.0 * self.sigma * self.sigma)).exp()
    }

    /// Unchecked evaluation for hot loops; callers guarantee equal lengths.
    #[inline]
    pub fn value(&self, p: &[f64], q: &[f64]) -> f64 {
        self.from_sq_dist(sq_dist(p, q))
    }

    /// Distance at which the kernel equals `value` (inverse of the kernel).
    pub fn radius_for_value(&self, value: f64) -> f64 {
        self.sigma * (2.0 * (-value.ln()).max(0.0)).sqrt()
    }
}

#[inline]
pub fn sq_dist(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[inline]
pub fn dot(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * b).sum()
}

/// Queries, keys and a bandwidth; implicitly defines `K_ij = k(q_i, k_j)`.
#[derive(Clone, Debug)]
pub struct KernelProblem {
    queries: PointSet,
    keys: PointSet,
    kernel: GaussianKernel,
}

impl KernelProblem {
    pub fn new(queries: PointSet, keys: PointSet, kernel: GaussianKernel) -> Result<Self> {
        if queries.dim() != keys.dim() {
            return Err(Error::DimensionMismatch {
                expected: keys.dim(),
                found: queries.dim(),
            });
        }
        Ok(Self {
            queries,
            keys,
            kernel,
        })
    }

    pub fn queries(&self) -> &PointSet {
        &self.queries
    }

    pub fn keys(&self) -> &PointSet {
        &self.keys
    }

    pub fn kernel(&self) -> GaussianKernel {
        self.kernel
    }

    /// Number of rows (queries).
    pub fn rows(&self) -> usize {
        self.queries.n()
    }

    /// Number of columns (keys); the length of `x`.
    pub fn n(&self) -> usize {
        self.keys.n()
    }

    pub fn dim(&self) -> usize {
        self.keys.dim()
    }

    pub fn is_square(&self) -> bool {
        self.rows() == self.n()
    }

    #[inline]
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.kernel
            .value(self.queries.point(i), self.keys.point(j))
    }

    /// The problem restricted to the first `len` queries and keys.
    pub fn prefix(&self, len: usize) -> Result<KernelProblem> {
        KernelProblem::new(self.queries.prefix(len)?, self.keys.prefix(len)?, self.kernel)
    }
}

/// A finite real vector (`x`, `y`, partial products).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealVector(Vec<f64>);

impl RealVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector"));
        }
        Ok(Self(values))
    }

    /// Wraps values already known to be finite.
    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self(values)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    /// ℓ₂ distance to another vector of the same length.
    pub fn distance(&self, other: &RealVector) -> f64 {
        sq_dist(&self.0, &other.0).sqrt()
    }
}

impl std::ops::Index<usize> for RealVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// `exp(-‖p - q‖² / (2σ²))` with dimension and finiteness checks.
pub fn eval_kernel(kernel: GaussianKernel, p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            found: q.len(),
        });
    }
    if p.iter().chain(q).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kernel argument"));
    }
    Ok(kernel.value(p, q))
}

/// Exact `Kx` in O(n²d). Rows are computed in parallel; each row sums its
/// columns in index order, so the output does not depend on thread count.
pub fn exact_matvec(problem: &KernelProblem, x: &RealVector) -> Result<RealVector> {
    if x.len() != problem.n() {
        return Err(Error::LengthMismatch {
            expected: problem.n(),
            found: x.len(),
        });
    }
    let kernel = problem.kernel();
    let keys = problem.keys();
    let xs = x.as_slice();
    let y = (0..problem.rows())
        .into_par_iter()
        .map(|i| {
            let q = problem.queries().point(i);
            let mut acc = 0.0;
            for (j, &xj) in xs.iter().enumerate() {
                acc += kernel.value(q, keys.point(j)) * xj;
            }
            acc
        })
        .collect();
    Ok(RealVector(y))
}

/// Dense kernel matrix for small problems (test support).
pub fn materialize(problem: &KernelProblem) -> Result<Matrix> {
    materialize_with_cap(problem, DEFAULT_ORACLE_CAP)
}

pub fn materialize_with_cap(problem: &KernelProblem, cap: usize) -> Result<Matrix> {
    let n = problem.rows().max(problem.n());
    if n > cap {
        return Err(Error::OracleCap { n, cap });
    }
    let cols = problem.n();
    let mut data = vec![0.0; problem.rows() * cols];
    data.par_chunks_mut(cols.max(1))
        .enumerate()
        .for_each(|(i, row)| {
            for (j, v) in row.iter_mut().enumerate() {
                *v = problem.entry(i, j);
            }
        });
    Matrix::new(problem.rows(), cols, data)
}

/// Total order on matrix entries: larger value first, then row, then column.
#[inline]
pub(crate) fn entry_order(a: (f64, usize, usize), b: (f64, usize, usize)) -> Ordering {
    b.0.total_cmp(&a.0)
        .then(a.1.cmp(&b.1))
        .then(a.2.cmp(&b.2))
}

/// Splits the entries of `matrix` into the `t` largest ("head") and the rest.
///
/// The head is summed in descending order; the tail is the row-major total
/// minus the head, clamped at zero. `t` equal to the entry count gives a zero
/// tail.
pub fn sum_top_t(matrix: &Matrix, t: usize) -> Result<(f64, f64)> {
    let total_entries = matrix.rows() * matrix.cols();
    if t > total_entries {
        return Err(Error::OutOfRange {
            t,
            max: total_entries,
        });
    }
    let mut entries: Vec<(f64, usize, usize)> = (0..matrix.rows())
        .flat_map(|i| (0..matrix.cols()).map(move |j| (i, j)))
        .map(|(i, j)| (matrix.get(i, j), i, j))
        .collect();
    if t < entries.len() && t > 0 {
        entries.select_nth_unstable_by(t - 1, |a, b| entry_order(*a, *b));
    }
    entries.truncate(t);
    entries.sort_unstable_by(|a, b| entry_order(*a, *b));
    let head: f64 = entries.iter().map(|e| e.0).sum();
    let tail = if t == total_entries {
        0.0
    } else {
        (matrix.sum() - head).max(0.0)
    };
    Ok((head, tail))
}
