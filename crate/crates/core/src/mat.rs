//! Small row-major dense matrix used for embeddings and layer parameters.
//!
//! Everything in the crate runs in f64; model sizes are desk scale, so a
//! plain `Vec<f64>` with explicit loops keeps the math auditable.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "expected {}x{}={} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::ShapeMismatch("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Ok(Mat {
            rows: r,
            cols: c,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn same_shape(&self, other: &Mat) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, a: f64) {
        self.data.iter_mut().for_each(|x| *x *= a);
    }

    /// self += a * other
    pub fn axpy(&mut self, a: f64, other: &Mat) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(format!(
                "axpy {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (x, y) in self.data.iter_mut().zip(other.data.iter()) {
            *x += a * y;
        }
        Ok(())
    }

    /// Squared Frobenius norm.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Index of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<(usize, usize)> {
        self.data
            .iter()
            .position(|x| !x.is_finite())
            .map(|i| (i / self.cols, i % self.cols))
    }
}

/// y = W x + b with W of shape (out, in).
pub fn affine_forward(w: &Mat, b: &[f64], x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(w.cols(), x.len());
    debug_assert_eq!(w.rows(), y.len());
    debug_assert_eq!(b.len(), y.len());
    for (r, out) in y.iter_mut().enumerate() {
        let row = w.row(r);
        let mut acc = b[r];
        for (wi, xi) in row.iter().zip(x.iter()) {
            acc += wi * xi;
        }
        *out = acc;
    }
}

/// dx += W^T dy
pub fn affine_backward_input(w: &Mat, dy: &[f64], dx: &mut [f64]) {
    debug_assert_eq!(w.rows(), dy.len());
    debug_assert_eq!(w.cols(), dx.len());
    for (r, g) in dy.iter().enumerate() {
        let row = w.row(r);
        for (dxi, wi) in dx.iter_mut().zip(row.iter()) {
            *dxi += wi * g;
        }
    }
}

/// dW += dy ⊗ x, db += dy
pub fn affine_backward_params(dw: &mut Mat, db: &mut [f64], dy: &[f64], x: &[f64]) {
    debug_assert_eq!(dw.rows(), dy.len());
    debug_assert_eq!(dw.cols(), x.len());
    for (r, g) in dy.iter().enumerate() {
        let row = dw.row_mut(r);
        for (dwi, xi) in row.iter_mut().zip(x.iter()) {
            *dwi += g * xi;
        }
        db[r] += g;
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}
