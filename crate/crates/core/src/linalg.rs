//! Dense real matrices.
//!
//! Storage is row-major: entry `(i, j)` lives at `data[i * cols + j]`.
//! The `vec` operator is column-stacking, independent of storage order, so
//! `kron(p, q) * vec(t) == vec(q * t * p^T)`.

use std::fmt::{Debug, Display};
use std::ops::{Index, IndexMut};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Floating point element type for [`Mat`].
pub trait Scalar: Float + FromPrimitive + Debug + Display + Default + Send + Sync + 'static {
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Most jitter escalations `sym_inverse` attempts before giving up.
pub const MAX_JITTER_ESCALATIONS: usize = 3;

#[derive(Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Mat<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
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

    /// Builds a matrix from row-major entries, rejecting bad shapes and non-finite values.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::dims(format!("empty matrix {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::dims(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("entry {bad} of {rows}x{cols} matrix")));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dims("ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Row-major entries.
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

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

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    fn check_same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dims(format!(
                "{op}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        let mut out = self.clone();
        out.add_scaled_assign(other, T::one())?;
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        let mut out = self.clone();
        out.add_scaled_assign(other, -T::one())?;
        Ok(out)
    }

    /// `self += s * other`
    pub fn add_scaled_assign(&mut self, other: &Self, s: T) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (x, &y) in self.data.iter_mut().zip(&other.data) {
            *x = *x + s * y;
        }
        Ok(())
    }

    /// `self = rho * self + (1 - rho) * other`
    pub fn blend_assign(&mut self, other: &Self, rho: T) -> Result<()> {
        self.check_same_shape(other, "blend")?;
        let w = T::one() - rho;
        for (x, &y) in self.data.iter_mut().zip(&other.data) {
            *x = rho * *x + w * y;
        }
        Ok(())
    }

    pub fn add_diagonal(&self, d: T) -> Result<Self> {
        if !self.is_square() {
            return Err(Error::dims("add_diagonal on non-square matrix"));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            out[(i, i)] = out[(i, i)] + d;
        }
        Ok(out)
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).fold(T::zero(), |acc, i| acc + self[(i, i)])
    }

    /// Frobenius inner product `sum_ij a_ij b_ij`.
    pub fn dot(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }

    /// Largest `|m_ij - m_ji|`.
    pub fn asymmetry(&self) -> T {
        let mut worst = T::zero();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// Replaces the matrix by `(M + M^T) / 2`.
    pub fn symmetrize(&mut self) {
        let half = T::lit(0.5);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let v = (self[(i, j)] + self[(j, i)]) * half;
                self[(i, j)] = v;
                self[(j, i)] = v;
            }
        }
    }

    /// `self * other`
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::dims(format!(
                "matmul {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (p, &a) in self.row(i).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(p)) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * other`
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::dims(format!(
                "matmul_tn {:?}^T x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Self::zeros(self.cols, other.cols);
        for p in 0..self.rows {
            let b_row = other.row(p);
            for (i, &a) in self.row(p).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::dims(format!(
                "matmul_nt {:?} x {:?}^T",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot_slices(a_row, other.row(j));
            }
        }
        Ok(out)
    }

    /// `self^T * self`, computed on the upper triangle and mirrored so the
    /// result is exactly symmetric.
    pub fn gram(&self) -> Self {
        let n = self.cols;
        let mut out = Self::zeros(n, n);
        for p in 0..self.rows {
            let r = self.row(p);
            for i in 0..n {
                let a = r[i];
                if a == T::zero() {
                    continue;
                }
                let out_row = &mut out.data[i * n..(i + 1) * n];
                for j in i..n {
                    out_row[j] = out_row[j] + a * r[j];
                }
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                out.data[j * n + i] = out.data[i * n + j];
            }
        }
        out
    }

    pub fn matvec(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.cols {
            return Err(Error::dims(format!(
                "matvec {:?} x {}",
                self.shape(),
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot_slices(self.row(i), v)).collect())
    }

    /// Lower-triangular Cholesky factor, or `None` when a pivot is not positive.
    pub fn cholesky(&self) -> Option<Self> {
        if !self.is_square() {
            return None;
        }
        let n = self.rows;
        let mut l = Self::zeros(n, n);
        for j in 0..n {
            let mut d = self[(j, j)];
            for k in 0..j {
                d = d - l[(j, k)] * l[(j, k)];
            }
            if !(d > T::zero()) || !d.is_finite() {
                return None;
            }
            let d = d.sqrt();
            l[(j, j)] = d;
            for i in (j + 1)..n {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s = s - l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / d;
            }
        }
        Some(l)
    }
}

impl<T> Index<(usize, usize)> for Mat<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Mat<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot_slices<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Inverse of the lower-triangular factor `l`.
fn lower_inverse<T: Scalar>(l: &Mat<T>) -> Mat<T> {
    let n = l.rows();
    let mut inv = Mat::zeros(n, n);
    for j in 0..n {
        inv[(j, j)] = T::one() / l[(j, j)];
        for i in (j + 1)..n {
            let mut s = T::zero();
            for k in j..i {
                s = s + l[(i, k)] * inv[(k, j)];
            }
            inv[(i, j)] = -s / l[(i, i)];
        }
    }
    inv
}

/// Inverse of a symmetric positive-definite matrix through Cholesky.
///
/// When factorization fails, `jitter * I` is added and the jitter grows
/// tenfold, at most [`MAX_JITTER_ESCALATIONS`] times. A zero starting jitter
/// escalates from `1e-10` times the mean diagonal magnitude.
pub fn sym_inverse<T: Scalar>(m: &Mat<T>, jitter: T) -> Result<Mat<T>> {
    if !m.is_square() {
        return Err(Error::dims(format!("sym_inverse of {:?}", m.shape())));
    }
    let scale = T::one().max(m.max_abs());
    let asym = m.asymmetry();
    if asym > T::lit(1e-10) * scale {
        return Err(Error::NotSymmetric(asym.to_f64().unwrap_or(f64::NAN)));
    }
    let n = m.rows();
    let base = if jitter > T::zero() {
        jitter
    } else {
        let mean_diag = m.trace().abs() / T::from_usize(n).unwrap();
        T::lit(1e-10) * mean_diag.max(T::min_positive_value().sqrt())
    };
    let mut shift = if jitter > T::zero() { jitter } else { T::zero() };
    let mut escalations = 0;
    loop {
        let shifted = if shift > T::zero() {
            m.add_diagonal(shift)?
        } else {
            m.clone()
        };
        if let Some(l) = shifted.cholesky() {
            let li = lower_inverse(&l);
            let mut inv = li.matmul_tn(&li)?;
            inv.symmetrize();
            if inv.is_finite() {
                return Ok(inv);
            }
        }
        if escalations == MAX_JITTER_ESCALATIONS {
            return Err(Error::NotInvertible { escalations });
        }
        escalations += 1;
        shift = if shift > T::zero() {
            shift * T::lit(10.0)
        } else {
            base
        };
    }
}

/// Solves `m x = b` for symmetric positive-definite `m`.
pub fn sym_solve<T: Scalar>(m: &Mat<T>, b: &[T]) -> Result<Vec<T>> {
    if !m.is_square() || m.rows() != b.len() {
        return Err(Error::dims("sym_solve shape"));
    }
    let l = m.cholesky().ok_or(Error::NotInvertible { escalations: 0 })?;
    let n = b.len();
    let mut y = vec![T::zero(); n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s = s - l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    let mut x = vec![T::zero(); n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s = s - l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    Ok(x)
}

/// Kronecker product, block `(i, j)` equal to `p_ij * q`.
pub fn kron<T: Scalar>(p: &Mat<T>, q: &Mat<T>) -> Mat<T> {
    let (qr, qc) = q.shape();
    Mat::from_fn(p.rows() * qr, p.cols() * qc, |i, j| {
        p[(i / qr, j / qc)] * q[(i % qr, j % qc)]
    })
}

/// Column-stacking vectorization.
pub fn vec<T: Scalar>(m: &Mat<T>) -> Vec<T> {
    let mut out = Vec::with_capacity(m.rows() * m.cols());
    for j in 0..m.cols() {
        for i in 0..m.rows() {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Inverse of [`vec`].
pub fn unvec<T: Scalar>(v: &[T], rows: usize, cols: usize) -> Result<Mat<T>> {
    if v.len() != rows * cols {
        return Err(Error::dims(format!(
            "unvec of length {} into {rows}x{cols}",
            v.len()
        )));
    }
    Ok(Mat::from_fn(rows, cols, |i, j| v[j * rows + i]))
}

/// Matrix with orthonormal rows (or columns, whichever is shorter) scaled by
/// `gain`, built by Gram-Schmidt on the supplied Gaussian draws.
pub fn orthogonal<T: Scalar>(rows: usize, cols: usize, gain: T, gaussian: impl FnMut() -> T) -> Mat<T> {
    let tall = rows >= cols;
    let (n, k) = if tall { (rows, cols) } else { (cols, rows) };
    // k orthonormal vectors of length n
    let mut draw = gaussian;
    let mut basis: Vec<Vec<T>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<T> = (0..n).map(|_| draw()).collect();
        for _ in 0..2 {
            for b in &basis {
                let d = dot_slices(&v, b);
                for (x, &y) in v.iter_mut().zip(b) {
                    *x = *x - d * y;
                }
            }
        }
        let norm = dot_slices(&v, &v).sqrt();
        if norm > T::lit(1e-8) {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Mat::from_fn(rows, cols, |i, j| {
        let v = if tall { basis[j][i] } else { basis[i][j] };
        gain * v
    })
}
