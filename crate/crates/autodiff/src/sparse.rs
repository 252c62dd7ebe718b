//! Row-sorted sparse matrices used as constant inputs to a matmul.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A `[rows, cols]` matrix stored as `(row, col, value)` entries in
/// row-major order with no repeated positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows<T> {
    rows: usize,
    cols: usize,
    entries: Vec<(u32, u32, T)>,
}

impl<T: Scalar> SparseRows<T> {
    /// Validates bounds and strict row-major ordering.
    pub fn new(rows: usize, cols: usize, entries: Vec<(u32, u32, T)>) -> Result<Self> {
        let mut prev: Option<(u32, u32)> = None;
        for &(r, c, _) in &entries {
            if r as usize >= rows || c as usize >= cols {
                return shape_err("sparse", format!("entry ({r}, {c}) outside {rows}x{cols}"));
            }
            if prev.is_some_and(|p| p >= (r, c)) {
                return shape_err("sparse", format!("entry ({r}, {c}) out of row-major order"));
            }
            prev = Some((r, c));
        }
        Ok(SparseRows { rows, cols, entries })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[(u32, u32, T)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Dense copy; zero entries stay zero.
    pub fn to_dense(&self) -> Tensor<T> {
        let mut data = vec![T::zero(); self.rows * self.cols];
        for &(r, c, v) in &self.entries {
            data[r as usize * self.cols + c as usize] = v;
        }
        Tensor::matrix(self.rows, self.cols, data).expect("shape matches by construction")
    }

    /// `self[m, k] * b[k, n]`, accumulating in the same order as the dense
    /// kernel so both give identical results.
    pub fn matmul(&self, b: &[T], n: usize) -> Vec<T> {
        let mut c = vec![T::zero(); self.rows * n];
        for &(r, k, v) in &self.entries {
            if v == T::zero() {
                continue;
            }
            let crow = &mut c[r as usize * n..(r as usize + 1) * n];
            let brow = &b[k as usize * n..(k as usize + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + v * bv;
            }
        }
        c
    }

    /// `db[k, n] += self^T * dc[m, n]`.
    pub fn matmul_grad_b(&self, dc: &[T], db: &mut [T], n: usize) {
        for &(r, k, v) in &self.entries {
            if v == T::zero() {
                continue;
            }
            let dcrow = &dc[r as usize * n..(r as usize + 1) * n];
            let dbrow = &mut db[k as usize * n..(k as usize + 1) * n];
            for (d, &g) in dbrow.iter_mut().zip(dcrow) {
                *d = *d + v * g;
            }
        }
    }
}
