//! Dense row-major tensors and the handful of matrix kernels the optimizers need.

use serde::{Deserialize, Serialize};

use crate::error::{FaarError, Result};

/// Row-major `f64` tensor with an explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let count: usize = shape.iter().product();
        if shape.is_empty() || count == 0 {
            return Err(FaarError::EmptyTensor("tensor shape has zero elements"));
        }
        if count != data.len() {
            return Err(FaarError::ShapeMismatch(format!(
                "shape {:?} holds {} elements but {} values were given",
                shape,
                count,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let count = shape.iter().product();
        Tensor::new(shape, vec![0.0; count])
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
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

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(FaarError::ShapeMismatch(format!(
                "expected a matrix, got shape {other:?}"
            ))),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `out[b, o] = Σ_i a[b, i] · w[o, i]`, i.e. `a · wᵀ` for row-major `a` (rows × k) and `w` (n × k).
pub(crate) fn matmul_nt(a: &[f64], rows: usize, k: usize, w: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows * k);
    debug_assert_eq!(w.len(), n * k);
    let mut out = vec![0.0; rows * n];
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (w_row, o) in w.chunks_exact(k).zip(out_row.iter_mut()) {
            *o = dot(a_row, w_row);
        }
    }
    out
}

/// `out = a · w` for `a` (rows × k) and `w` (k × n).
pub(crate) fn matmul_nn(a: &[f64], rows: usize, k: usize, w: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows * k);
    debug_assert_eq!(w.len(), k * n);
    let mut out = vec![0.0; rows * n];
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&aik, w_row) in a_row.iter().zip(w.chunks_exact(n)) {
            if aik == 0.0 {
                continue;
            }
            for (o, &wkj) in out_row.iter_mut().zip(w_row) {
                *o += aik * wkj;
            }
        }
    }
    out
}

/// `out = aᵀ · b` for `a` (rows × m) and `b` (rows × n), producing m × n.
pub(crate) fn matmul_tn(a: &[f64], rows: usize, m: usize, b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows * m);
    debug_assert_eq!(b.len(), rows * n);
    let mut out = vec![0.0; m * n];
    for (a_row, b_row) in a.chunks_exact(m).zip(b.chunks_exact(n)) {
        for (&ai, out_row) in a_row.iter().zip(out.chunks_exact_mut(n)) {
            if ai == 0.0 {
                continue;
            }
            for (o, &bj) in out_row.iter_mut().zip(b_row) {
                *o += ai * bj;
            }
        }
    }
    out
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
