//! Dense row-major matrices.
//!
//! Everything here is deliberately plain: desk-scale models never exceed a
//! few hundred channels, so a straightforward `i-k-j` product is fast enough
//! and, more importantly, has a fixed accumulation order. Each output element
//! is built by adding `a[i,k] * b[k,j]` for `k` ascending, whether the rows are
//! computed on one thread or many.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{Index, IndexMut};

use num_traits::Float;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::RngState;

/// Floating-point element type of a [`Matrix`]: `f32` or `f64`.
pub trait Scalar: Float + Default + Debug + Sum + Send + Sync + 'static {}
impl<T: Float + Default + Debug + Sum + Send + Sync + 'static> Scalar for T {}

/// Minimum number of multiply-adds before `matmul` fans out over rows.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Clone, PartialEq)]
pub struct Matrix<T: Scalar = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Matrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Matrix<{}x{}>", self.rows, self.cols)?;
        if self.rows * self.cols <= 64 {
            f.debug_list().entries(self.data.chunks(self.cols.max(1))).finish()?;
        }
        Ok(())
    }
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

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

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input; meant
    /// for literals in tests and examples.
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

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn col(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.data[r * self.cols + c]).collect()
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

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self × other`, accumulating over the inner index in ascending order.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{}x{} times {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = Self::zeros(n, m);
        if m == 0 {
            return Ok(out);
        }
        let kernel = |(i, out_row): (usize, &mut [T])| {
            let a_row = &self.data[i * k..(i + 1) * k];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        };
        if n * k * m >= PAR_THRESHOLD && n > 1 {
            out.data.par_chunks_mut(m).enumerate().for_each(kernel);
        } else {
            out.data.chunks_mut(m).enumerate().for_each(kernel);
        }
        Ok(out)
    }

    /// `selfᵀ × other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        self.transpose().matmul(other)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same(other, op)?;
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

    fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        Ok(())
    }

    /// Squared Frobenius norm, summed in storage order.
    pub fn frobenius_sq(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    pub fn frobenius(&self) -> T {
        self.frobenius_sq().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    /// `‖self − reference‖_F / ‖reference‖_F` (absolute error if the
    /// reference is zero).
    pub fn rel_error(&self, reference: &Self) -> Result<T> {
        let diff = self.sub(reference)?.frobenius();
        let denom = reference.frobenius();
        Ok(if denom > T::zero() { diff / denom } else { diff })
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &r in idx {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn select_cols(&self, idx: &[usize]) -> Self {
        Self::from_fn(self.rows, idx.len(), |r, c| self[(r, idx[c])])
    }

    /// Columns `start..end` as a new matrix.
    pub fn col_block(&self, start: usize, end: usize) -> Self {
        Self::from_fn(self.rows, end - start, |r, c| self[(r, start + c)])
    }

    /// Rows stacked vertically; all inputs must share a column count.
    pub fn vstack(parts: &[&Self]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::shape("vstack", format!("{} vs {} columns", p.cols, cols)));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Self { rows, cols, data })
    }

    /// `‖AᵀA − I‖_F`.
    pub fn orthogonality_defect(&self) -> Result<T> {
        let gram = self.t_matmul(self)?;
        Ok(gram.sub(&Self::identity(self.cols))?.frobenius())
    }

    fn check_square(&self, op: &'static str) -> Result<usize> {
        if self.rows != self.cols {
            return Err(Error::shape(op, format!("{}x{} is not square", self.rows, self.cols)));
        }
        Ok(self.rows)
    }

    /// Gauss–Jordan inverse with partial pivoting.
    pub fn inverse(&self) -> Result<Self> {
        let n = self.check_square("inverse")?;
        let mut a = self.clone();
        let mut inv = Self::identity(n);
        let tol = singular_tolerance(self);
        for col in 0..n {
            let pivot_row = pivot_index(&a, col);
            let pivot = a[(pivot_row, col)];
            if !(pivot.abs() > tol) {
                return Err(Error::Singular {
                    column: col,
                    pivot: pivot.to_f64().unwrap_or(f64::NAN),
                });
            }
            a.swap_rows(col, pivot_row);
            inv.swap_rows(col, pivot_row);
            let p_inv = T::one() / a[(col, col)];
            for c in 0..n {
                a[(col, c)] = a[(col, c)] * p_inv;
                inv[(col, c)] = inv[(col, c)] * p_inv;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let factor = a[(r, col)];
                if factor == T::zero() {
                    continue;
                }
                for c in 0..n {
                    let av = a[(col, c)];
                    let iv = inv[(col, c)];
                    a[(r, c)] = a[(r, c)] - factor * av;
                    inv[(r, c)] = inv[(r, c)] - factor * iv;
                }
            }
        }
        Ok(inv)
    }

    /// Determinant via LU with partial pivoting; zero for singular input.
    pub fn determinant(&self) -> Result<T> {
        let n = self.check_square("determinant")?;
        let mut a = self.clone();
        let mut det = T::one();
        for col in 0..n {
            let pivot_row = pivot_index(&a, col);
            let pivot = a[(pivot_row, col)];
            if pivot == T::zero() {
                return Ok(T::zero());
            }
            if pivot_row != col {
                a.swap_rows(col, pivot_row);
                det = -det;
            }
            det = det * pivot;
            for r in col + 1..n {
                let factor = a[(r, col)] / pivot;
                for c in col..n {
                    let v = a[(col, c)];
                    a[(r, c)] = a[(r, c)] - factor * v;
                }
            }
        }
        Ok(det)
    }

    fn swap_rows(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        for c in 0..self.cols {
            self.data.swap(a * self.cols + c, b * self.cols + c);
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| U::from(*v).expect("float cast"))
                .collect(),
        }
    }
}

fn pivot_index<T: Scalar>(a: &Matrix<T>, col: usize) -> usize {
    let mut best = col;
    for r in col + 1..a.rows {
        if a[(r, col)].abs() > a[(best, col)].abs() {
            best = r;
        }
    }
    best
}

fn singular_tolerance<T: Scalar>(a: &Matrix<T>) -> T {
    let n = T::from(a.rows.max(1)).unwrap();
    T::epsilon() * n * a.max_abs()
}

impl<T: Scalar> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    fn index(&self, (r, c): (usize, usize)) -> &T {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl<T: Scalar> IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

impl Matrix<f64> {
    /// i.i.d. `N(0, std²)` entries drawn row-major from `rng`'s stream `(tag, index)`.
    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &RngState, tag: &str, index: u64) -> Self {
        let mut stream = rng.stream(tag, index);
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut stream);
                z * std
            })
            .collect();
        Self { rows, cols, data }
    }
}

/// Haar-distributed orthogonal matrix: Householder QR of a Gaussian draw with
/// the signs of `R`'s diagonal folded into `Q`, which makes the result a pure
/// function of the draw.
pub fn random_orthogonal(d: usize, rng: &RngState) -> Matrix<f64> {
    let g = Matrix::gaussian(d, d, 1.0, rng, "random_orthogonal", d as u64);
    let (q, r_diag) = householder_qr(&g);
    let mut out = q;
    for c in 0..d {
        if r_diag[c] < 0.0 {
            for r in 0..d {
                out[(r, c)] = -out[(r, c)];
            }
        }
    }
    out
}

/// Returns `(Q, diag(R))` for a square matrix.
fn householder_qr(a: &Matrix<f64>) -> (Matrix<f64>, Vec<f64>) {
    let n = a.rows();
    let mut r = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let mut v: Vec<f64> = (k..n).map(|i| r[(i, k)]).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            reflectors.push(vec![0.0; n - k]);
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= vnorm;
        }
        for c in k..n {
            let dot: f64 = (k..n).map(|i| v[i - k] * r[(i, c)]).sum();
            for i in k..n {
                r[(i, c)] -= 2.0 * v[i - k] * dot;
            }
        }
        reflectors.push(v);
    }
    let mut q = Matrix::identity(n);
    for k in (0..n).rev() {
        let v = &reflectors[k];
        for c in 0..n {
            let dot: f64 = (k..n).map(|i| v[i - k] * q[(i, c)]).sum();
            for i in k..n {
                q[(i, c)] -= 2.0 * v[i - k] * dot;
            }
        }
    }
    let diag = (0..n).map(|i| r[(i, i)]).collect();
    (q, diag)
}
