//! Dense row-major tensors and the handful of kernels everything else is
//! built from.
//!
//! All reductions run in a fixed ascending-index order so repeated runs are
//! bit-identical; matmul variants with transposed operands materialize the
//! transpose and reuse the one kernel, which keeps the per-element reduction
//! order (ascending k) unchanged.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor::new",
                format!("shape {:?} wants {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Rank-1 singleton holding one value; the autodiff graph uses this for
    /// scalar nodes such as losses.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
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

    /// Sole element of a scalar tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(
                "dims2",
                format!("expected rank 2, got shape {:?}", self.shape),
            ));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let n = self.last_dim();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let n = self.last_dim();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    fn zip_with(
        &self,
        other: &Tensor<T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn transpose2(&self) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(&[n, m], out)
    }

    /// `self[M×K] · other[K×N]`, reduction over k in ascending order.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: {:?} x {:?}", self.shape, other.shape),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (kk, &a_ik) in a_row.iter().enumerate() {
                let b_row = &other.data[kk * n..(kk + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o = *o + a_ik * b;
                }
            }
        }
        Tensor::new(&[m, n], out)
    }

    /// `self[M×K] · otherᵀ` with `other[N×K]`.
    pub fn matmul_nt(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.matmul(&other.transpose2()?)
    }

    /// `selfᵀ · other` with `self[K×M]`, `other[K×N]`.
    pub fn matmul_tn(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.transpose2()?.matmul(other)
    }

    /// Softmax over the last dimension with max-subtraction for stability.
    /// Rows of any leading shape are normalized independently.
    pub fn softmax_lastdim(&self) -> Tensor<T> {
        let n = self.last_dim();
        debug_assert!(n >= 1);
        let mut out = self.data.clone();
        for row in out.chunks_mut(n) {
            softmax_row(row);
        }
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax_lastdim(&self) -> Tensor<T> {
        let n = self.last_dim();
        let mut out = self.data.clone();
        for row in out.chunks_mut(n) {
            let max = row_max(row);
            let mut sum = T::zero();
            for v in row.iter() {
                sum = sum + (*v - max).exp();
            }
            let log_z = max + sum.ln();
            for v in row.iter_mut() {
                *v = *v - log_z;
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
    }

    /// Contiguous row slice `[start, start+count)` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        if start + count > m {
            return Err(Error::shape(
                "slice_rows",
                format!("rows [{start}, {}) out of {m}", start + count),
            ));
        }
        Tensor::new(&[count, n], self.data[start * n..(start + count) * n].to_vec())
    }
}

fn row_max<T: Scalar>(row: &[T]) -> T {
    let mut max = row[0];
    for &v in &row[1..] {
        if v > max {
            max = v;
        }
    }
    max
}

pub(crate) fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row_max(row);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Per-row layer normalization over the last dimension:
/// `out = (x - mean) / sqrt(var + eps) * gamma + beta` with population
/// variance. Returns the normalized tensor plus per-row mean and
/// `1/sqrt(var+eps)`, which the backward pass reuses.
pub fn layer_norm_rows<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let n = x.last_dim();
    if gamma.len() != n || beta.len() != n {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "gamma/beta lengths {}/{} do not match last dim {}",
                gamma.len(),
                beta.len(),
                n
            ),
        ));
    }
    let rows = x.len() / n;
    let mut out = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut inv_stds = Vec::with_capacity(rows);
    let inv_n = T::one() / T::from_usize(n);
    for r in 0..rows {
        let xs = &x.data()[r * n..(r + 1) * n];
        let mut mean = T::zero();
        for &v in xs {
            mean = mean + v;
        }
        mean = mean * inv_n;
        let mut var = T::zero();
        for &v in xs {
            let d = v - mean;
            var = var + d * d;
        }
        var = var * inv_n;
        let inv_std = T::one() / (var + eps).sqrt();
        let os = &mut out[r * n..(r + 1) * n];
        for j in 0..n {
            os[j] = (xs[j] - mean) * inv_std * gamma.data()[j] + beta.data()[j];
        }
        means.push(mean);
        inv_stds.push(inv_std);
    }
    let out = Tensor::new(x.shape(), out)?;
    Ok((out, means, inv_stds))
}

/// Layer normalization returning only the normalized tensor.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    Ok(layer_norm_rows(x, gamma, beta, eps)?.0)
}
