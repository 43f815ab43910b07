//! Dense row-major tensors and the raw kernels the tape differentiates.
//!
//! Kernels here never record anything; they are plain functions on values.
//! Only bias-over-rows broadcasting is supported.

use crate::error::{FmtError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(FmtError::ShapeData {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// A `1×n` row.
    pub fn row(values: Vec<T>) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values,
        }
    }

    /// Builds an `m×n` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            if r.len() != n {
                return Err(FmtError::dim("from_rows", &[n], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![m, n], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Views the tensor as a matrix: `[n]` is a `1×n` row, `[m, n]` is itself.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [] => Ok((1, 1)),
            [n] => Ok((1, *n)),
            [m, n] => Ok((*m, *n)),
            other => Err(FmtError::Contract(format!(
                "expected a vector or matrix, got shape {other:?}"
            ))),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(FmtError::ShapeData {
                shape,
                expected,
                actual: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn get2(&self, i: usize, j: usize) -> T {
        let (_, n) = self.dims2().expect("matrix");
        self.data[i * n + j]
    }

    pub fn row_slice(&self, i: usize) -> &[T] {
        let (_, n) = self.dims2().expect("matrix");
        &self.data[i * n..(i + 1) * n]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64_lossless()).collect()
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(FmtError::dim("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    pub fn zip_map(&self, other: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(FmtError::dim(op, &self.shape, &other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        if bias.len() != n {
            return Err(FmtError::dim("add_bias", &self.shape, &bias.shape));
        }
        let mut out = self.data.clone();
        for i in 0..m {
            for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Row-wise softmax. Entries equal to negative infinity are the mask
    /// sentinel: they are skipped and receive exactly zero weight.
    pub fn softmax_rows(&self) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        let sentinel = T::neg_infinity();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let mut max = sentinel;
            for &x in row {
                if x == sentinel {
                    continue;
                }
                if !x.is_finite() {
                    return Err(FmtError::Contract(format!(
                        "softmax_rows: non-finite entry {x} in row {i}"
                    )));
                }
                if x > max {
                    max = x;
                }
            }
            if max == sentinel {
                return Err(FmtError::FullyMaskedRow { row: i });
            }
            let o_row = &mut out[i * n..(i + 1) * n];
            let mut sum = T::zero();
            for (o, &x) in o_row.iter_mut().zip(row) {
                if x != sentinel {
                    *o = (x - max).exp();
                    sum += *o;
                }
            }
            for o in o_row.iter_mut() {
                *o /= sum;
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Column sums of an `m×n` matrix as a `1×n` row.
    pub fn sum_rows(&self) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for (o, &x) in out.iter_mut().zip(&self.data[i * n..(i + 1) * n]) {
                *o += x;
            }
        }
        Tensor::new(vec![1, n], out)
    }

    pub fn mean_rows(&self) -> Result<Tensor<T>> {
        let (m, _) = self.dims2()?;
        if m == 0 {
            return Err(FmtError::Contract("mean_rows of an empty matrix".into()));
        }
        let inv = T::one() / T::from_count(m);
        Ok(self.sum_rows()?.map(|x| x * inv))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn argmax(&self) -> usize {
        // ties resolve to the lowest index
        let mut best = 0;
        for (i, &x) in self.data.iter().enumerate() {
            if x > self.data[best] {
                best = i;
            }
        }
        best
    }
}
