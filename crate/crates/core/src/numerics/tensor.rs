//! Dense row-major f64 tensor.
//!
//! Verification arithmetic everywhere in this crate is 64-bit; the same code
//! paths serve training. Shapes are plain extent lists, data is one
//! contiguous buffer.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, asserting that the extents match the buffer length.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let expected: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            expected,
            "shape {:?} expects {} elements, got {}",
            shape,
            expected,
            data.len()
        );
        Self { shape, data }
    }

    /// Checked constructor: validates extents and rejects NaN/Inf entries.
    pub fn checked(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Dimension(format!(
                "shape {:?} expects {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value {} at flat index {i}",
                data[i]
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar extraction; panics unless the tensor holds exactly one value.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} values", self.data.len());
        self.data[0]
    }

    /// Multi-index read (row-major).
    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let i = self.flat_index(idx);
        self.data[i] = value;
    }

    fn flat_index(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&x, &extent)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(x < extent, "index {x} out of range for axis {i} (extent {extent})");
            flat = flat * extent + x;
        }
        flat
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        let expected: usize = shape.iter().product();
        assert_eq!(self.data.len(), expected, "reshape {:?} -> {:?}", self.shape, shape);
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Self {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Population standard deviation over all entries.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        let var = self.data.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64;
        var.sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// 2-D matrix product: (m×k)·(k×n).
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rank(), 2, "matmul lhs must be 2-D");
        assert_eq!(other.rank(), 2, "matmul rhs must be 2-D");
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        assert_eq!(k, k2, "matmul inner extents {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    /// 2-D transpose.
    pub fn transpose2d(&self) -> Tensor {
        assert_eq!(self.rank(), 2, "transpose2d on rank {}", self.rank());
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }
}

/// `out += a·b` for row-major buffers, parallelized over rows of `a`.
///
/// Accumulation order within each output element is fixed, so results do not
/// depend on thread count.
pub fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    crate::par::for_each_chunk_mut(out, n, |i, out_row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (l, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
}

/// `out += a·bᵀ` where `b` is n×k row-major.
pub fn matmul_transb_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    crate::par::for_each_chunk_mut(out, n, |i, out_row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o += acc;
        }
    });
}

/// `out += aᵀ·b` where `a` is k×m row-major.
pub fn matmul_transa_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    crate::par::for_each_chunk_mut(out, n, |i, out_row| {
        for l in 0..k {
            let av = a[l * m + i];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
}
