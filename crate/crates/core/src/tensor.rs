//! Minimal row-major matrix used by the model and attention code.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data has wrong length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.cols, "row has wrong width");
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `x W^T` where `w` is stored as `[out, in]`.
pub fn matmul_t(x: &Matrix, w: &Matrix) -> Matrix {
    assert_eq!(x.cols, w.cols, "inner dimensions differ");
    let mut out = Matrix::zeros(x.rows, w.rows);
    for o in 0..w.rows {
        let wr = w.row(o);
        for r in 0..x.rows {
            out.data[r * w.rows + o] = dot(x.row(r), wr);
        }
    }
    out
}

/// `dy W` for `dy: [rows, out]` and `w: [out, in]`.
pub fn matmul(dy: &Matrix, w: &Matrix) -> Matrix {
    assert_eq!(dy.cols, w.rows, "inner dimensions differ");
    let mut out = Matrix::zeros(dy.rows, w.cols);
    for r in 0..dy.rows {
        let orow = &mut out.data[r * w.cols..(r + 1) * w.cols];
        for (o, &g) in dy.row(r).iter().enumerate() {
            if g != 0.0 {
                axpy(g, w.row(o), orow);
            }
        }
    }
    out
}

/// Accumulates `dy^T x` into `grad` (shape `[out, in]`).
pub fn accumulate_outer(grad: &mut Matrix, dy: &Matrix, x: &Matrix) {
    assert_eq!(dy.rows, x.rows);
    assert_eq!((grad.rows, grad.cols), (dy.cols, x.cols));
    for r in 0..dy.rows {
        let xr = x.row(r);
        for (o, &g) in dy.row(r).iter().enumerate() {
            if g != 0.0 {
                axpy(g, xr, grad.row_mut(o));
            }
        }
    }
}

/// Numerically stable softmax in place; returns the log normaliser.
pub fn softmax_in_place(v: &mut [f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
    max + sum.ln()
}
