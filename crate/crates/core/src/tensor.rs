//! Minimal dense numeric arrays.
//!
//! Tensors are rank-1 or rank-2, row-major, with tokens as rows and features
//! as columns. Values are `f64` by default; the benchmark harness instantiates
//! the same ops at `f32`. There is no broadcasting beyond scalar scaling —
//! callers tile or reshape explicitly, which keeps the oracle tests
//! unambiguous.

use num_traits::Float;

use crate::{Error, Result};

/// Scalar element type for tensors. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + std::fmt::Debug + std::fmt::Display + std::iter::Sum + Send + Sync + 'static
{
    /// Guard used in norm denominators so zero rows stay zero instead of NaN.
    fn norm_guard() -> Self;
}

impl Scalar for f64 {
    fn norm_guard() -> Self {
        1e-12
    }
}

impl Scalar for f32 {
    fn norm_guard() -> Self {
        1e-12
    }
}

/// Lp norm selector for [`Tensor::norm_rows`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormP {
    L1,
    L2,
}

/// Dense row-major array with explicit shape (rank 1 or 2).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Build a tensor from a shape and flat row-major data.
    ///
    /// Fails if the element count does not match the shape product, if any
    /// extent is zero, or if any value is non-finite.
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::Dimension(format!(
                "rank must be 1 or 2, got shape {shape:?}"
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Dimension(format!("zero extent in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} expects {expected} values, got {}",
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.check_finite()?;
        Ok(t)
    }

    /// Rank-1 tensor from a slice.
    pub fn vector(values: &[T]) -> Result<Self> {
        Self::from_vec(vec![values.len()], values.to_vec())
    }

    /// Rank-2 tensor from flat row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::from_vec(vec![rows, cols], data)
    }

    /// Rank-2 tensor built row by row from nested slices.
    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Dimension("no rows".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let data: Vec<T> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::matrix(rows.len(), cols, data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::one(); n],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count; a rank-1 tensor is treated as a single row.
    pub fn rows(&self) -> usize {
        if self.rank() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Column count; for rank-1 tensors this is the length.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn at(&self, row: usize, col: usize) -> T {
        debug_assert!(row < self.rows() && col < self.cols());
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!(
                "tensor of shape {:?} contains NaN or Inf",
                self.shape
            )))
        }
    }

    /// Reinterpret the data under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.is_empty() || shape.len() > 2 {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Standard matrix product. Inner extents must match.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::Dimension("matmul needs rank-2 operands".into()));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner extents differ: {k} vs {k2}"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let a_row = i * k;
            let o_row = i * n;
            for p in 0..k {
                let a = self.data[a_row + p];
                let b_row = p * n;
                for j in 0..n {
                    out[o_row + j] = out[o_row + j] + a * other.data[b_row + j];
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Tensor<T> {
        match self.rank() {
            1 => self.clone(),
            _ => {
                let (m, n) = (self.shape[0], self.shape[1]);
                let mut out = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[j * m + i] = self.data[i * n + j];
                    }
                }
                Tensor {
                    shape: vec![n, m],
                    data: out,
                }
            }
        }
    }

    /// Softmax within each row, with max-subtraction for stability.
    pub fn softmax_rows(&self) -> Tensor<T> {
        let (m, n) = (self.rows(), self.cols());
        let mut out = self.data.clone();
        for i in 0..m {
            softmax_in_place(&mut out[i * n..(i + 1) * n]);
        }
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
    }

    /// Softmax within each column (down the token axis).
    pub fn softmax_cols(&self) -> Tensor<T> {
        let (m, n) = (self.rows(), self.cols());
        let mut data = self.data.clone();
        for j in 0..n {
            let mut mx = T::neg_infinity();
            for i in 0..m {
                mx = mx.max(data[i * n + j]);
            }
            let mut sum = T::zero();
            for i in 0..m {
                let e = (data[i * n + j] - mx).exp();
                data[i * n + j] = e;
                sum = sum + e;
            }
            for i in 0..m {
                data[i * n + j] = data[i * n + j] / sum;
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Sum over the row (token) axis: M x N -> vector of length N.
    pub fn sum_rows(&self) -> Tensor<T> {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for j in 0..n {
                out[j] = out[j] + self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n],
            data: out,
        }
    }

    /// Sum over the column (feature) axis: M x N -> vector of length M.
    pub fn sum_cols(&self) -> Tensor<T> {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); m];
        for i in 0..m {
            for j in 0..n {
                out[i] = out[i] + self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![m],
            data: out,
        }
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn ewise_mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip(other, |a, b| a * b)
    }

    pub fn ewise_add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip(other, |a, b| a + b)
    }

    pub fn ewise_sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip(other, |a, b| a - b)
    }

    fn zip(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Per-row Lp norm: M x N -> vector of length M.
    pub fn norm_rows(&self, p: NormP) -> Tensor<T> {
        let (m, n) = (self.rows(), self.cols());
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let v = match p {
                NormP::L1 => row.iter().fold(T::zero(), |acc, &x| acc + x.abs()),
                NormP::L2 => row
                    .iter()
                    .fold(T::zero(), |acc, &x| acc + x * x)
                    .sqrt(),
            };
            out.push(v);
        }
        Tensor {
            shape: vec![m],
            data: out,
        }
    }

    /// Copy columns `start..end` into a new tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor<T>> {
        let (m, n) = (self.rows(), self.cols());
        if start >= end || end > n {
            return Err(Error::Dimension(format!(
                "column slice {start}..{end} out of bounds for {n} columns"
            )));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&self.data[i * n + start..i * n + end]);
        }
        Ok(Tensor {
            shape: vec![m, w],
            data,
        })
    }

    /// Copy rows `start..end` into a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor<T>> {
        let (m, n) = (self.rows(), self.cols());
        if start >= end || end > m {
            return Err(Error::Dimension(format!(
                "row slice {start}..{end} out of bounds for {m} rows"
            )));
        }
        Ok(Tensor {
            shape: vec![end - start, n],
            data: self.data[start * n..end * n].to_vec(),
        })
    }

    /// Concatenate along the column axis. All parts need equal row counts.
    pub fn concat_cols(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat of nothing".into()));
        }
        let m = parts[0].rows();
        if parts.iter().any(|p| p.rows() != m) {
            return Err(Error::Dimension("concat_cols row counts differ".into()));
        }
        let n: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data,
        })
    }

    /// Concatenate along the row axis. All parts need equal column counts.
    pub fn concat_rows(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat of nothing".into()));
        }
        let n = parts[0].cols();
        if parts.iter().any(|p| p.cols() != n) {
            return Err(Error::Dimension("concat_rows column counts differ".into()));
        }
        let m: usize = parts.iter().map(|p| p.rows()).sum();
        let mut data = Vec::with_capacity(m * n);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: vec![m, n],
            data,
        })
    }

    /// Repeat a length-N vector (or 1 x N matrix) as T rows.
    pub fn tile_rows(&self, t: usize) -> Result<Tensor<T>> {
        if self.rows() != 1 && self.rank() != 1 {
            return Err(Error::Dimension(format!(
                "tile_rows needs a single row, got shape {:?}",
                self.shape
            )));
        }
        let n = self.cols();
        let mut data = Vec::with_capacity(t * n);
        for _ in 0..t {
            data.extend_from_slice(&self.data[..n]);
        }
        Ok(Tensor {
            shape: vec![t, n],
            data,
        })
    }

    /// Largest absolute elementwise difference against another tensor.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "max_abs_diff shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }
}

impl Tensor<f64> {
    /// Largest elementwise relative error against another tensor, using the
    /// floored metric from [`crate::relative_error`].
    pub fn max_relative_error(&self, other: &Tensor<f64>) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "relative error shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(self
            .data()
            .iter()
            .zip(other.data())
            .fold(0.0f64, |acc, (&a, &b)| acc.max(crate::relative_error(a, b))))
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}
