//! Dense row-major f64 matrices, sized for desk-scale training.
//!
//! Accumulation order inside every product is fixed (k-major per output
//! element), so results are bit-reproducible across runs and thread counts;
//! rayon only ever splits work across independent output rows.

use rayon::prelude::*;

/// Row-parallel threshold: below this many scalar ops, threading overhead
/// dominates and the loop runs serially.
const PAR_FLOP_THRESHOLD: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
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

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = f(*v));
        out
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(
            (self.rows, self.cols),
            (other.rows, other.cols),
            "zip_map shape mismatch"
        );
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::from_vec(self.rows, self.cols, data)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// self += s * other
    pub fn axpy(&mut self, s: f64, other: &Self) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    /// Adds a 1 x cols bias row to every row.
    pub fn add_bias_row(&self, bias: &Self) -> Self {
        assert_eq!(bias.rows, 1, "bias must be a single row");
        assert_eq!(bias.cols, self.cols, "bias width mismatch");
        let mut out = self.clone();
        for r in 0..out.rows {
            for (v, b) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        out
    }

    /// Column sums as a 1 x cols tensor.
    pub fn col_sums(&self) -> Self {
        let mut out = Tensor::zeros(1, self.cols);
        for r in 0..self.rows {
            for (acc, v) in out.data.iter_mut().zip(self.row(r)) {
                *acc += v;
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// self (n x k) * other (k x m).
    pub fn matmul(&self, other: &Self) -> Self {
        let mut out = Tensor::zeros(self.rows, other.cols);
        out.matmul_acc(self, other);
        out
    }

    /// self += a * b, accumulating left to right over a's columns. The
    /// context-model paths rely on this exact order: the sequential decoder
    /// replays it row by row and must stay bit-identical.
    pub fn matmul_acc(&mut self, a: &Self, b: &Self) {
        assert_eq!(a.cols, b.rows, "matmul inner dimension mismatch");
        assert_eq!((self.rows, self.cols), (a.rows, b.cols), "output shape");
        let m = b.cols;
        let flops = a.rows * a.cols * m;
        if flops >= PAR_FLOP_THRESHOLD {
            self.data
                .par_chunks_mut(m)
                .enumerate()
                .for_each(|(r, out_row)| accumulate_row(out_row, a.row(r), b));
        } else {
            for (r, out_row) in self.data.chunks_mut(m).enumerate() {
                accumulate_row(out_row, a.row(r), b);
            }
        }
    }

    /// self^T (k x n)^T=(n x k) ... returns self^T * other, shape (cols x other.cols).
    pub fn transpose_matmul(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "transpose_matmul row mismatch");
        let mut out = Tensor::zeros(self.cols, other.cols);
        let m = other.cols;
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = other.row(r);
            for (c, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[c * m..(c + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// self (n x k) * other^T (m x k)^T, shape (n x m).
    pub fn matmul_transpose(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.cols, "matmul_transpose col mismatch");
        let mut out = Tensor::zeros(self.rows, other.rows);
        let m = other.rows;
        let flops = self.rows * self.cols * m;
        let body = |(r, out_row): (usize, &mut [f64])| {
            let a_row = self.row(r);
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = other.row(j);
                let mut acc = 0.0;
                for (a, b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                *o = acc;
            }
        };
        if flops >= PAR_FLOP_THRESHOLD {
            out.data
                .par_chunks_mut(m)
                .enumerate()
                .for_each(|(r, row)| body((r, row)));
        } else {
            for (r, row) in out.data.chunks_mut(m).enumerate() {
                body((r, row));
            }
        }
        out
    }

    pub fn transposed(&self) -> Self {
        Tensor::from_fn(self.cols, self.rows, |r, c| self.at(c, r))
    }
}

/// acc += x_row * w for one output row; the shared inner kernel of every
/// matrix product and of the sequential decoder's per-pixel replay.
#[inline]
pub fn accumulate_row(acc: &mut [f64], x_row: &[f64], w: &Tensor) {
    let m = w.cols;
    debug_assert_eq!(acc.len(), m);
    debug_assert_eq!(x_row.len(), w.rows);
    for (c, &a) in x_row.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let w_row = &w.data[c * m..(c + 1) * m];
        for (o, &b) in acc.iter_mut().zip(w_row) {
            *o += a * b;
        }
    }
}
