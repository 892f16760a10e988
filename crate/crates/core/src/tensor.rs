//! Dense row-major tensors and the primitive kernels the engine builds on.
//!
//! Storage is a flat `Vec<S>` with an explicit shape; no views or strides,
//! every slicing op copies. All kernels accumulate left-to-right in index
//! order so repeated calls are bit-identical and independent of where the
//! op runs. Non-finite outputs are surfaced as errors (checked exhaustively
//! under debug assertions, and at the loss/gradient guards in release).

use crate::error::{Error, Result};
use std::fmt;

/// Scalar types tensors can hold: f32 for training, f64 for gradient checks.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Bytes per element, used for message accounting in traces.
    const BYTES: usize;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    const BYTES: usize = 4;
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    const BYTES: usize = 8;
}

#[derive(Clone, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} values]", self.data.len())
        }
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: S) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_flat(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("from_flat", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// 2-D tensor from nested rows; rows must have equal width.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            if r.len() != n {
                return Err(Error::shape("from_rows", &[n], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            shape: vec![m, n],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn bytes(&self) -> u64 {
        (self.data.len() * S::BYTES) as u64
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> S {
        debug_assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.data[0]
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[S] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let n = self.cols();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn at(&self, i: usize, j: usize) -> S {
        self.data[i * self.shape[1] + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: S) {
        let n = self.shape[1];
        self.data[i * n + j] = v;
    }

    fn is_2d(&self) -> bool {
        self.shape.len() == 2
    }

    fn finite_guard(&self, op: &'static str) -> Result<()> {
        if cfg!(debug_assertions) {
            for v in &self.data {
                if !v.is_finite() {
                    return Err(Error::NonFinite { op });
                }
            }
        }
        Ok(())
    }

    /// Matrix product with fixed left-to-right accumulation over the inner
    /// dimension (identical element-wise to the naive triple loop).
    pub fn matmul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        if !self.is_2d() || !rhs.is_2d() || self.shape[1] != rhs.shape[0] {
            return Err(Error::shape("matmul", &self.shape, &rhs.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (kk, &a) in a_row.iter().enumerate() {
                let b_row = &rhs.data[kk * n..(kk + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        let t = Tensor {
            shape: vec![m, n],
            data: out,
        };
        t.finite_guard("matmul")?;
        Ok(t)
    }

    pub fn transpose(&self) -> Result<Tensor<S>> {
        if !self.is_2d() {
            return Err(Error::shape("transpose", &self.shape, &[]));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Row-wise softmax with max-subtraction. `mask` entries of 0 are
    /// excluded and come out exactly 0; a row with no unmasked entry is an
    /// error. `mask` uses 1.0 = keep, 0.0 = drop.
    pub fn softmax_rows(&self, mask: Option<&Tensor<S>>) -> Result<Tensor<S>> {
        if !self.is_2d() {
            return Err(Error::shape("softmax_rows", &self.shape, &[]));
        }
        if let Some(m) = mask {
            if m.shape != self.shape {
                return Err(Error::shape("softmax_rows mask", &self.shape, &m.shape));
            }
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![S::zero(); m * n];
        let half = S::from_f64(0.5);
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let keep = |j: usize| mask.map_or(true, |mk| mk.data[i * n + j] > half);
            let mut mx = S::neg_infinity();
            for j in 0..n {
                if keep(j) && row[j] > mx {
                    mx = row[j];
                }
            }
            if mx == S::neg_infinity() {
                return Err(Error::FullyMaskedRow { row: i });
            }
            let mut denom = S::zero();
            for j in 0..n {
                if keep(j) {
                    let e = (row[j] - mx).exp();
                    out[i * n + j] = e;
                    denom += e;
                }
            }
            for j in 0..n {
                out[i * n + j] /= denom;
            }
        }
        let t = Tensor {
            shape: vec![m, n],
            data: out,
        };
        t.finite_guard("softmax_rows")?;
        Ok(t)
    }

    /// Row-wise log-softmax, numerically stable via log-sum-exp.
    pub fn log_softmax_rows(&self) -> Result<Tensor<S>> {
        if !self.is_2d() {
            return Err(Error::shape("log_softmax_rows", &self.shape, &[]));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut denom = S::zero();
            for &x in row {
                denom += (x - mx).exp();
            }
            let lse = mx + denom.ln();
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        let t = Tensor {
            shape: vec![m, n],
            data: out,
        };
        t.finite_guard("log_softmax_rows")?;
        Ok(t)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn tanh(&self) -> Result<Tensor<S>> {
        let t = self.map(|v| v.tanh());
        t.finite_guard("tanh")?;
        Ok(t)
    }

    pub fn sigmoid(&self) -> Result<Tensor<S>> {
        let one = S::one();
        let t = self.map(|v| one / (one + (-v).exp()));
        t.finite_guard("sigmoid")?;
        Ok(t)
    }

    fn zip(&self, rhs: &Tensor<S>, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        if self.shape != rhs.shape {
            return Err(Error::shape(op, &self.shape, &rhs.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        let t = Tensor {
            shape: self.shape.clone(),
            data,
        };
        t.finite_guard(op)?;
        Ok(t)
    }

    pub fn add(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip(rhs, "mul", |a, b| a * b)
    }

    /// In-place `self += rhs`; shapes must match. Used on gradient buffers.
    pub fn add_assign(&mut self, rhs: &Tensor<S>) -> Result<()> {
        if self.shape != rhs.shape {
            return Err(Error::shape("add_assign", &self.shape, &rhs.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds a `1 x n` bias row to every row of an `m x n` tensor.
    pub fn add_row(&self, bias: &Tensor<S>) -> Result<Tensor<S>> {
        if !self.is_2d() || bias.shape != [1, self.shape[1]] {
            return Err(Error::shape("add_row", &self.shape, &bias.shape));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = self.data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bias.data[j];
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Multiplies row `i` of an `m x n` tensor by `col[i]` (`m x 1`).
    pub fn mul_col(&self, col: &Tensor<S>) -> Result<Tensor<S>> {
        if !self.is_2d() || col.shape != [self.shape[0], 1] {
            return Err(Error::shape("mul_col", &self.shape, &col.shape));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = self.data.clone();
        for i in 0..m {
            let c = col.data[i];
            for j in 0..n {
                data[i * n + j] *= c;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, s: S) -> Tensor<S> {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> S {
        let mut acc = S::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    /// Concatenates 2-D parts along `axis` (0 = rows, 1 = cols), in argument
    /// order. Parts with zero extent along `axis` are allowed.
    pub fn concat(parts: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>> {
        if parts.is_empty() {
            return Err(Error::Empty("concat of zero parts".into()));
        }
        if axis > 1 || parts.iter().any(|p| !p.is_2d()) {
            return Err(Error::shape("concat", parts[0].shape(), &[axis]));
        }
        let other = 1 - axis;
        let fixed = parts[0].shape[other];
        for p in parts {
            if p.shape[other] != fixed && p.shape[axis] != 0 {
                return Err(Error::shape("concat", &parts[0].shape, &p.shape));
            }
        }
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        if axis == 0 {
            let mut data = Vec::with_capacity(total * fixed);
            for p in parts {
                data.extend_from_slice(&p.data);
            }
            Ok(Tensor {
                shape: vec![total, fixed],
                data,
            })
        } else {
            let m = fixed;
            let mut data = Vec::with_capacity(m * total);
            for i in 0..m {
                for p in parts {
                    let w = p.shape[1];
                    data.extend_from_slice(&p.data[i * w..(i + 1) * w]);
                }
            }
            Ok(Tensor {
                shape: vec![m, total],
                data,
            })
        }
    }

    /// Copies the given rows (in index order, repeats allowed) into a new
    /// tensor. Also serves as embedding lookup.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor<S>> {
        if !self.is_2d() {
            return Err(Error::shape("gather_rows", &self.shape, &[]));
        }
        let n = self.shape[1];
        for &i in idx {
            if i >= self.shape[0] {
                return Err(Error::TokenOutOfRange {
                    id: i,
                    vocab: self.shape[0],
                });
            }
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        Ok(Tensor {
            shape: vec![idx.len(), n],
            data,
        })
    }

    /// Copies columns `[from, to)` of a 2-D tensor.
    pub fn slice_cols(&self, from: usize, to: usize) -> Result<Tensor<S>> {
        if !self.is_2d() || to < from || to > self.shape[1] {
            return Err(Error::shape("slice_cols", &self.shape, &[from, to]));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let w = to - from;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&self.data[i * n + from..i * n + to]);
        }
        Ok(Tensor {
            shape: vec![m, w],
            data,
        })
    }

    /// Copies rows `[from, to)` of a 2-D tensor.
    pub fn slice_rows(&self, from: usize, to: usize) -> Result<Tensor<S>> {
        if !self.is_2d() || to < from || to > self.shape[0] {
            return Err(Error::shape("slice_rows", &self.shape, &[from, to]));
        }
        let n = self.shape[1];
        Ok(Tensor {
            shape: vec![to - from, n],
            data: self.data[from * n..to * n].to_vec(),
        })
    }

    /// Column sums of a 2-D tensor as a `1 x n` row.
    pub fn sum_rows(&self) -> Result<Tensor<S>> {
        if !self.is_2d() {
            return Err(Error::shape("sum_rows", &self.shape, &[]));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![S::zero(); n];
        for i in 0..m {
            for j in 0..n {
                out[j] += self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![1, n],
            data: out,
        })
    }

    /// Row sums of a 2-D tensor as an `m x 1` column.
    pub fn sum_cols(&self) -> Result<Tensor<S>> {
        if !self.is_2d() {
            return Err(Error::shape("sum_cols", &self.shape, &[]));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![S::zero(); m];
        for i in 0..m {
            for j in 0..n {
                out[i] += self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![m, 1],
            data: out,
        })
    }

    /// Converts element type (f32 <-> f64) for precision switches.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn max_abs(&self) -> S {
        let mut mx = S::zero();
        for &v in &self.data {
            let a = v.abs();
            if a > mx {
                mx = a;
            }
        }
        mx
    }
}
