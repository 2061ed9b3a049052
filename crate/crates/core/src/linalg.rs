//! Dense row-major matrices and the Cholesky machinery behind every
//! marginal-likelihood and posterior computation.

use std::ops::{Index, IndexMut};

use crate::scalar::{c, Scalar};
use crate::{Error, Result};

/// Default starting jitter for kernel factorizations.
pub const DEFAULT_JITTER: f64 = 1e-10;

/// Number of ×10 jitter escalations attempted after the first failure.
pub const MAX_JITTER_ESCALATIONS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_diag(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; panics on ragged input.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// An n×1 matrix holding `v`.
    pub fn column(v: &[T]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diag(&self) -> Vec<T> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    /// Rows selected by `idx`, in that order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_to_diagonal(&mut self, v: T) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += v;
        }
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "matmul {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                axpy(a, other.row(k), out_row);
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::DimensionMismatch(format!(
                "matmul_t {:?} x {:?}ᵀ",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Self::from_fn(self.rows, other.rows, |i, j| {
            dot(self.row(i), other.row(j))
        }))
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "t_matmul {:?}ᵀ x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Self::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                axpy(a, b, out.row_mut(i));
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[T]) -> Result<Vec<T>> {
        if self.cols != v.len() {
            return Err(Error::DimensionMismatch(format!(
                "matvec {:?} x {}",
                self.shape(),
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// Largest entrywise asymmetry `|a_ij − a_ji|`.
    pub fn asymmetry(&self) -> T {
        let mut worst = T::zero();
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// Replaces the matrix by `(A + Aᵀ)/2`.
    pub fn symmetrize(&mut self) {
        let half = c::<T>(0.5);
        for i in 0..self.rows {
            for j in 0..i {
                let v = (self[(i, j)] + self[(j, i)]) * half;
                self[(i, j)] = v;
                self[(j, i)] = v;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> DenseMatrix<U> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::from_real(v.to_real())).collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for DenseMatrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for DenseMatrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += a·x`
#[inline]
pub(crate) fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Lower-triangular factor of `A + jitter_used·I`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor<T> {
    l: DenseMatrix<T>,
    jitter_used: T,
}

impl<T: Scalar> CholeskyFactor<T> {
    pub fn l(&self) -> &DenseMatrix<T> {
        &self.l
    }

    pub fn jitter_used(&self) -> T {
        self.jitter_used
    }

    pub fn dim(&self) -> usize {
        self.l.rows
    }

    /// `L Lᵀ`
    pub fn reconstruct(&self) -> DenseMatrix<T> {
        self.l.matmul_t(&self.l).expect("square factor")
    }

    /// Solves `L Y = B`.
    pub fn solve_lower(&self, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        self.check_rhs(b)?;
        let n = self.dim();
        let mut y = b.clone();
        for i in 0..n {
            let (done, rest) = y.data.split_at_mut(i * b.cols);
            let yi = &mut rest[..b.cols];
            let li = self.l.row(i);
            for (k, &lik) in li[..i].iter().enumerate() {
                if lik != T::zero() {
                    axpy(-lik, &done[k * b.cols..(k + 1) * b.cols], yi);
                }
            }
            let inv = T::one() / li[i];
            yi.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(y)
    }

    /// Solves `Lᵀ X = Y`.
    pub fn solve_upper(&self, y: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        self.check_rhs(y)?;
        let n = self.dim();
        let cols = y.cols;
        let mut x = y.clone();
        for i in (0..n).rev() {
            let (head, tail) = x.data.split_at_mut((i + 1) * cols);
            let xi = &mut head[i * cols..];
            for k in i + 1..n {
                let lki = self.l[(k, i)];
                if lki != T::zero() {
                    axpy(-lki, &tail[(k - i - 1) * cols..(k - i) * cols], xi);
                }
            }
            let inv = T::one() / self.l[(i, i)];
            xi.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(x)
    }

    pub fn solve_vec(&self, b: &[T]) -> Result<Vec<T>> {
        Ok(solve_cholesky(self, &DenseMatrix::column(b))?.into_vec())
    }

    /// `(L Lᵀ)⁻¹`, symmetrized.
    pub fn inverse(&self) -> DenseMatrix<T> {
        let mut inv = solve_cholesky(self, &DenseMatrix::identity(self.dim())).expect("square");
        inv.symmetrize();
        inv
    }

    fn check_rhs(&self, b: &DenseMatrix<T>) -> Result<()> {
        if b.rows != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "factor of side {} against right-hand side with {} rows",
                self.dim(),
                b.rows
            )));
        }
        Ok(())
    }
}

fn try_cholesky<T: Scalar>(a: &DenseMatrix<T>, jitter: T) -> Option<DenseMatrix<T>> {
    let n = a.rows;
    let mut l = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s = dot(&l.row(i)[..j], &l.row(j)[..j]);
            if i == j {
                let d = a[(i, i)] + jitter - s;
                if !(d > T::zero()) || !d.is_finite() {
                    return None;
                }
                l[(i, i)] = d.sqrt();
            } else {
                l[(i, j)] = (a[(i, j)] - s) / l[(j, j)];
            }
        }
    }
    Some(l)
}

/// Factorizes a symmetric matrix, escalating diagonal jitter ×10 (from
/// `base_jitter`, or from [`DEFAULT_JITTER`] when that is zero) up to
/// [`MAX_JITTER_ESCALATIONS`] times.
pub fn cholesky<T: Scalar>(a: &DenseMatrix<T>, base_jitter: T) -> Result<CholeskyFactor<T>> {
    if a.rows != a.cols {
        return Err(Error::DimensionMismatch(format!(
            "cholesky of non-square {:?}",
            a.shape()
        )));
    }
    let tol = c::<T>(1e-10) * (T::one() + a.max_abs());
    if a.asymmetry() > tol {
        return Err(Error::DimensionMismatch(format!(
            "cholesky input not symmetric (asymmetry {})",
            a.asymmetry()
        )));
    }
    let mut jitter = base_jitter.max(T::zero());
    for attempt in 0..=MAX_JITTER_ESCALATIONS {
        if let Some(l) = try_cholesky(a, jitter) {
            return Ok(CholeskyFactor {
                l,
                jitter_used: jitter,
            });
        }
        if attempt < MAX_JITTER_ESCALATIONS {
            jitter = if jitter > T::zero() {
                jitter * c(10.0)
            } else {
                c(DEFAULT_JITTER)
            };
        }
    }
    Err(Error::NotPositiveDefinite {
        jitter: jitter.to_real(),
    })
}

/// Solves `(L Lᵀ) X = B` by forward then back substitution.
pub fn solve_cholesky<T: Scalar>(f: &CholeskyFactor<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    let y = f.solve_lower(b)?;
    f.solve_upper(&y)
}

/// `log |L Lᵀ| = 2 Σ log L_ii`
pub fn logdet_from_cholesky<T: Scalar>(f: &CholeskyFactor<T>) -> T {
    f.l.diag().into_iter().map(|d| d.ln()).sum::<T>() * c(2.0)
}
