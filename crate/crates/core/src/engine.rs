//! Execution engines for the differentiable pipeline.
//!
//! The model forward pass is written once against the [`Engine`] trait.
//! [`EagerEngine`] evaluates immediately for inference; the recording
//! engine in [`crate::tape`] builds a graph for reverse-mode
//! differentiation. Both call the same kernels in the same order, so the
//! two execution modes produce bit-identical values.

use crate::mat::{kernels, Mat};

pub trait Engine {
    type T: Clone;

    /// Untracked input; never receives a gradient.
    fn constant(&mut self, m: Mat) -> Self::T;

    /// Forward value of a tensor.
    fn value<'a>(&'a self, t: &'a Self::T) -> &'a Mat;

    fn matmul(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    /// `a * b^T`.
    fn matmul_nt(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn add(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn sub(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    /// Broadcast a 1xC row vector over every row.
    fn add_row_vec(&mut self, m: &Self::T, row: &Self::T) -> Self::T;
    /// Broadcast an Rx1 column vector over every column.
    fn add_col_vec(&mut self, m: &Self::T, col: &Self::T) -> Self::T;
    fn relu(&mut self, x: &Self::T) -> Self::T;
    fn exp(&mut self, x: &Self::T) -> Self::T;
    fn neg(&mut self, x: &Self::T) -> Self::T;
    /// Elementwise multiply by a 1x1 tensor.
    fn scale(&mut self, x: &Self::T, s: &Self::T) -> Self::T;
    fn mul_constmat(&mut self, x: &Self::T, c: &Mat) -> Self::T;
    fn scale_const(&mut self, x: &Self::T, c: f64) -> Self::T;
    fn add_const(&mut self, x: &Self::T, c: f64) -> Self::T;
    fn div_const(&mut self, x: &Self::T, c: f64) -> Self::T;
    fn clamp_const(&mut self, x: &Self::T, lo: f64, hi: f64) -> Self::T;
    fn concat_cols(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn softmax_rows(&mut self, x: &Self::T) -> Self::T;
    /// Row-wise log-sum-exp as an Rx1 column vector.
    fn lse_rows(&mut self, x: &Self::T) -> Self::T;
    /// Column-wise log-sum-exp as a 1xC row vector.
    fn lse_cols(&mut self, x: &Self::T) -> Self::T;
    /// Append a dustbin row/column filled with the 1x1 scalar `alpha`.
    fn pad_dustbin(&mut self, s: &Self::T, alpha: &Self::T) -> Self::T;
    /// Pick entries at `(i, j)` into a Kx1 column vector.
    fn gather(&mut self, x: &Self::T, idx: &[(usize, usize)]) -> Self::T;
    /// Sum of all entries as a 1x1 tensor.
    fn sum(&mut self, x: &Self::T) -> Self::T;
}

/// Direct evaluation without recording.
#[derive(Default)]
pub struct EagerEngine;

impl Engine for EagerEngine {
    type T = Mat;

    fn constant(&mut self, m: Mat) -> Mat {
        m
    }

    fn value<'a>(&'a self, t: &'a Mat) -> &'a Mat {
        t
    }

    fn matmul(&mut self, a: &Mat, b: &Mat) -> Mat {
        kernels::matmul(a, b)
    }

    fn matmul_nt(&mut self, a: &Mat, b: &Mat) -> Mat {
        kernels::matmul_nt(a, b)
    }

    fn add(&mut self, a: &Mat, b: &Mat) -> Mat {
        kernels::add(a, b)
    }

    fn sub(&mut self, a: &Mat, b: &Mat) -> Mat {
        kernels::sub(a, b)
    }

    fn add_row_vec(&mut self, m: &Mat, row: &Mat) -> Mat {
        kernels::add_row_vec(m, row)
    }

    fn add_col_vec(&mut self, m: &Mat, col: &Mat) -> Mat {
        kernels::add_col_vec(m, col)
    }

    fn relu(&mut self, x: &Mat) -> Mat {
        kernels::relu(x)
    }

    fn exp(&mut self, x: &Mat) -> Mat {
        kernels::exp(x)
    }

    fn neg(&mut self, x: &Mat) -> Mat {
        kernels::neg(x)
    }

    fn scale(&mut self, x: &Mat, s: &Mat) -> Mat {
        kernels::scale(x, s.item())
    }

    fn mul_constmat(&mut self, x: &Mat, c: &Mat) -> Mat {
        kernels::mul_elem(x, c)
    }

    fn scale_const(&mut self, x: &Mat, c: f64) -> Mat {
        kernels::scale_const(x, c)
    }

    fn add_const(&mut self, x: &Mat, c: f64) -> Mat {
        kernels::add_const(x, c)
    }

    fn div_const(&mut self, x: &Mat, c: f64) -> Mat {
        kernels::div_const(x, c)
    }

    fn clamp_const(&mut self, x: &Mat, lo: f64, hi: f64) -> Mat {
        kernels::clamp_const(x, lo, hi)
    }

    fn concat_cols(&mut self, a: &Mat, b: &Mat) -> Mat {
        kernels::concat_cols(a, b)
    }

    fn softmax_rows(&mut self, x: &Mat) -> Mat {
        kernels::softmax_rows(x)
    }

    fn lse_rows(&mut self, x: &Mat) -> Mat {
        kernels::logsumexp_rows(x)
    }

    fn lse_cols(&mut self, x: &Mat) -> Mat {
        kernels::logsumexp_cols(x)
    }

    fn pad_dustbin(&mut self, s: &Mat, alpha: &Mat) -> Mat {
        kernels::pad_dustbin(s, alpha.item())
    }

    fn gather(&mut self, x: &Mat, idx: &[(usize, usize)]) -> Mat {
        kernels::gather(x, idx)
    }

    fn sum(&mut self, x: &Mat) -> Mat {
        kernels::sum_all(x)
    }
}
