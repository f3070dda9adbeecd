//! Row-major `f64` matrix with the handful of operations the model needs.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    /// Uniform init in `(-1/sqrt(fan_in), +1/sqrt(fan_in))`.
    pub fn uniform_init(rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / math::sqrt(fan_in.max(1) as f64);
        let mut m = Matrix::zeros(rows, cols);
        for v in &mut m.data {
            *v = rng.next_range(-bound, bound);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `x * self` for a row vector `x` of length `rows`; output length `cols`.
    pub fn vec_mul(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let xr = x[r];
            if xr == 0.0 {
                continue;
            }
            let row = self.row(r);
            for c in 0..self.cols {
                out[c] += xr * row[c];
            }
        }
        out
    }

    /// `self * y` for a column vector `y` of length `cols`; output length `rows`.
    pub fn mul_vec(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.cols);
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            out[r] = math::dot(self.row(r), y);
        }
        out
    }

    /// Rank-1 accumulation `self += a^T b` (outer product of column `a`, row `b`).
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), self.rows);
        assert_eq!(b.len(), self.cols);
        for r in 0..self.rows {
            let ar = a[r];
            if ar == 0.0 {
                continue;
            }
            let row = self.row_mut(r);
            for c in 0..b.len() {
                row[c] += ar * b[c];
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `out[i] += a[i]` elementwise.
pub fn add_assign(out: &mut [f64], a: &[f64]) {
    debug_assert_eq!(out.len(), a.len());
    for i in 0..out.len() {
        out[i] += a[i];
    }
}

/// `out[i] += s * a[i]` elementwise.
pub fn add_scaled(out: &mut [f64], a: &[f64], s: f64) {
    debug_assert_eq!(out.len(), a.len());
    for i in 0..out.len() {
        out[i] += s * a[i];
    }
}
