//! Dense row-major f64 matrices.
//!
//! All model math runs on `Tensor2D` in double precision; persistence
//! converts to little-endian f32 at the file boundary (see `io`).
//! Checked constructors reject NaN/Inf and shape/count mismatches;
//! internal kernels assume shapes were validated by the caller.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor2D {
    /// Checked constructor: rejects count mismatches and non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "expected {}x{}={} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite value {} at flat index {}",
                data[idx], idx
            )));
        }
        Ok(Self {
            rows,
            cols,
            data,
            requires_grad: false,
        })
    }

    /// Unchecked constructor for kernel outputs whose inputs were validated.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            rows,
            cols,
            data,
            requires_grad: false,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::from_raw(rows, cols, vec![value; rows * cols])
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_raw(rows, cols, data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::shape("from_rows requires at least one row"));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows in from_rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_raw(1, 1, vec![value])
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2D {
        Tensor2D::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor2D, f: impl Fn(f64, f64) -> f64) -> Tensor2D {
        debug_assert_eq!(self.shape(), other.shape());
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor2D::from_raw(self.rows, self.cols, data)
    }

    /// In-place accumulate, used by gradient aggregation.
    pub fn add_assign(&mut self, other: &Tensor2D) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale(&self, c: f64) -> Tensor2D {
        self.map(|v| v * c)
    }

    pub fn matmul(&self, other: &Tensor2D) -> Tensor2D {
        debug_assert_eq!(self.cols, other.rows);
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o += a * b;
                }
            }
        }
        Tensor2D::from_raw(m, n, out)
    }

    pub fn transpose(&self) -> Tensor2D {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Tensor2D::from_raw(self.cols, self.rows, out)
    }

    /// Column sums as a 1 x cols tensor.
    pub fn col_sums(&self) -> Tensor2D {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c] += self.data[r * self.cols + c];
            }
        }
        Tensor2D::from_raw(1, self.cols, out)
    }

    /// Row sums as a rows x 1 tensor.
    pub fn row_sums(&self) -> Tensor2D {
        let out = (0..self.rows)
            .map(|r| self.row(r).iter().sum())
            .collect();
        Tensor2D::from_raw(self.rows, 1, out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Row-wise softmax with max subtraction. Kernel shared by the tape op
/// and the public forward wrapper.
pub(crate) fn softmax_rows_kernel(x: &Tensor2D) -> Tensor2D {
    let mut out = Tensor2D::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let mut exps = vec![0.0; row.len()];
        for (e, &v) in exps.iter_mut().zip(row.iter()) {
            *e = (v - max).exp();
            sum += *e;
        }
        for (c, e) in exps.iter().enumerate() {
            out.set(r, c, e / sum);
        }
    }
    out
}

/// log(sum(exp(row))) for each row, as rows x 1.
pub(crate) fn logsumexp_rows_kernel(x: &Tensor2D) -> Tensor2D {
    let out = (0..x.rows())
        .map(|r| {
            let row = x.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            max + sum.ln()
        })
        .collect();
    Tensor2D::from_raw(x.rows(), 1, out)
}

/// Column counterpart of `logsumexp_rows_kernel`, as 1 x cols.
pub(crate) fn logsumexp_cols_kernel(x: &Tensor2D) -> Tensor2D {
    let mut maxes = vec![f64::NEG_INFINITY; x.cols()];
    for r in 0..x.rows() {
        for (c, m) in maxes.iter_mut().enumerate() {
            *m = m.max(x.get(r, c));
        }
    }
    let mut sums = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            sums[c] += (x.get(r, c) - maxes[c]).exp();
        }
    }
    let out = maxes
        .iter()
        .zip(sums.iter())
        .map(|(&m, &s)| {
            if m == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                m + s.ln()
            }
        })
        .collect();
    Tensor2D::from_raw(1, x.cols(), out)
}

/// Numerically stable log(exp(a) + exp(b)).
pub(crate) fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}
