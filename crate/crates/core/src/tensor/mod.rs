//! Dense `f64` tensors and a tape-based reverse-mode autodiff engine.

mod gradcheck;
mod kernels;
mod optim;
mod params;
mod tape;

pub use gradcheck::{finite_diff_gradient, relative_error};
pub use kernels::{gemm, Transpose};
pub use optim::Adam;
pub use params::{Init, ParamId, ParamSet, ParamSpec};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn get(&self, index: &[usize]) -> Option<f64> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return None;
            }
            flat = flat * d + i;
        }
        Some(self.data[flat])
    }

    /// Plain (non-recorded) matrix product with the same broadcasting rules
    /// as [`Tape::matmul`].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let plan = MatmulPlan::new(&self.shape, &other.shape, Transpose::No)?;
        let mut out = vec![0.0; plan.out_len()];
        plan.forward(&self.data, &other.data, &mut out);
        Tensor::new(plan.out_shape, out)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(format!(
            "shape {:?} must have at least one axis and positive extents",
            shape
        )));
    }
    Ok(())
}

/// Resolved geometry of a (possibly batched) matrix product.
#[derive(Debug, Clone)]
pub(crate) struct MatmulPlan {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `b` is a single matrix shared by every batch entry.
    pub shared_rhs: bool,
    pub trans_b: Transpose,
    pub out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize], trans_b: Transpose) -> Result<Self> {
        let mismatch = || Error::shape(format!("matmul of {:?} by {:?} ({:?})", a, b, trans_b));
        if a.len() < 2 || b.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (bk, n) = match trans_b {
            Transpose::No => (b[b.len() - 2], b[b.len() - 1]),
            Transpose::Yes => (b[b.len() - 1], b[b.len() - 2]),
        };
        if bk != k {
            return Err(mismatch());
        }
        let a_batch = &a[..a.len() - 2];
        let b_batch = &b[..b.len() - 2];
        let shared_rhs = b_batch.is_empty();
        if !shared_rhs && a_batch != b_batch {
            return Err(mismatch());
        }
        let mut out_shape = a_batch.to_vec();
        out_shape.extend([m, n]);
        Ok(MatmulPlan {
            batch: a_batch.iter().product(),
            m,
            k,
            n,
            shared_rhs,
            trans_b,
            out_shape,
        })
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.m * self.n
    }

    pub fn forward(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.shared_rhs && self.trans_b == Transpose::No {
            // Fold the batch into the row dimension.
            gemm(a, Transpose::No, b, Transpose::No, out, self.batch * m, k, n);
            return;
        }
        for s in 0..self.batch {
            let bs = if self.shared_rhs { 0 } else { s * k * n };
            gemm(
                &a[s * m * k..(s + 1) * m * k],
                Transpose::No,
                &b[bs..bs + k * n],
                self.trans_b,
                &mut out[s * m * n..(s + 1) * m * n],
                m,
                k,
                n,
            );
        }
    }
}
