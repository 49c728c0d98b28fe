use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::matrix::DenseMatrix;
use crate::scalar::Scalar;

/// Compressed sparse row matrix used for bag-of-words feature input.
///
/// The first affine layer multiplies this by a dense weight matrix; with
/// typical feature densities of 1-2% this is far cheaper than the dense path.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix<T> {
    rows: usize,
    cols: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> CsrMatrix<T> {
    pub fn from_dense(m: &DenseMatrix<T>) -> Self {
        let mut offsets = Vec::with_capacity(m.rows() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        offsets.push(0);
        for i in 0..m.rows() {
            for (j, &v) in m.row(i).iter().enumerate() {
                if v != T::zero() {
                    indices.push(j);
                    values.push(v);
                }
            }
            offsets.push(indices.len());
        }
        Self {
            rows: m.rows(),
            cols: m.cols(),
            offsets,
            indices,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.offsets[i]..self.offsets[i + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn to_dense(&self) -> DenseMatrix<T> {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                out.set(i, j, v);
            }
        }
        out
    }

    /// Inverted dropout over the stored entries. Zeros stay zero, so this is
    /// distributionally identical to dense dropout on the same matrix.
    pub fn dropout<R: Rng + ?Sized>(&self, rate: T, rng: &mut R) -> Self {
        if rate == T::zero() {
            return self.clone();
        }
        let keep = T::one() - rate;
        let scale = T::one() / keep;
        let keep_f = keep.as_f64();
        let values = self
            .values
            .iter()
            .map(|&v| {
                if rng.random::<f64>() < keep_f {
                    v * scale
                } else {
                    T::zero()
                }
            })
            .collect();
        Self {
            values,
            ..self.clone()
        }
    }

    /// `self · w` for dense `w`.
    pub fn matmul(&self, w: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        if self.cols != w.rows() {
            return Err(Error::shape("sparse matmul", self.cols, w.rows()));
        }
        let mut out = DenseMatrix::zeros(self.rows, w.cols());
        for i in 0..self.rows {
            let out_row = out.row_mut(i);
            for (j, v) in self.row(i) {
                for (o, &b) in out_row.iter_mut().zip(w.row(j)) {
                    *o += v * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · g` for dense `g`.
    pub fn t_matmul(&self, g: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        if self.rows != g.rows() {
            return Err(Error::shape("sparse t_matmul", self.rows, g.rows()));
        }
        let mut out = DenseMatrix::zeros(self.cols, g.cols());
        for i in 0..self.rows {
            let gi = g.row(i);
            for (j, v) in self.row(i) {
                for (o, &b) in out.row_mut(j).iter_mut().zip(gi) {
                    *o += v * b;
                }
            }
        }
        Ok(out)
    }
}
