//! Dense row-major matrices.
//!
//! Values are held as `f64`. A matrix tagged [`Dtype::F32`] only ever holds
//! values representable in single precision: every kernel rounds its result
//! and products are computed with a single-precision GEMM, so an `F32`
//! matrix behaves like (and is accounted as) a 4-byte tensor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    /// Element width in bytes.
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Dtype::F32 => x as f32 as f64,
            Dtype::F64 => x,
        }
    }

    /// The wider of two dtypes.
    pub fn promote(self, other: Dtype) -> Dtype {
        if self == Dtype::F64 || other == Dtype::F64 {
            Dtype::F64
        } else {
            Dtype::F32
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    dtype: Dtype,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize, dtype: Dtype) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            dtype,
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64, dtype: Dtype) -> Self {
        Self {
            rows,
            cols,
            data: vec![dtype.round(value); rows * cols],
            dtype,
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>, dtype: Dtype) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        let mut m = Self {
            rows,
            cols,
            data,
            dtype,
        };
        m.round_in_place();
        Ok(m)
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for tests and fixtures.
    pub fn from_rows(rows: &[&[f64]], dtype: Dtype) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data, dtype).expect("shape checked above")
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

    pub fn dtype(&self) -> Dtype {
        self.dtype
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = self.dtype.round(v);
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Re-tags the matrix, rounding values when narrowing.
    pub fn to_dtype(&self, dtype: Dtype) -> Matrix {
        let mut m = self.clone();
        m.dtype = dtype;
        m.round_in_place();
        m
    }

    pub fn round_in_place(&mut self) {
        if self.dtype == Dtype::F32 {
            for x in &mut self.data {
                *x = *x as f32 as f64;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let dtype = self.dtype;
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| dtype.round(f(x))).collect(),
            dtype,
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows, self.dtype);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: rows.len(),
            cols: self.cols,
            data,
            dtype: self.dtype,
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// `self += other`, element-wise.
    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        let dtype = self.dtype;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = dtype.round(*a + b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        let dtype = self.dtype;
        for a in &mut self.data {
            *a = dtype.round(*a * s);
        }
    }

    /// Largest element-wise absolute difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Bitwise equality of shape and values (dtype ignored).
    pub fn bitwise_eq(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// `alpha * op(a) * op(b)` where `op` optionally transposes.
pub fn gemm(a: &Matrix, trans_a: bool, b: &Matrix, trans_b: bool, alpha: f64) -> Result<Matrix> {
    let (m, ka) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    if ka != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let k = ka;
    let dtype = a.dtype.promote(b.dtype);
    let mut out = Matrix::zeros(m, n, dtype);
    if m == 0 || n == 0 || k == 0 {
        return Ok(out);
    }
    // row/column strides of the logical operands
    let (rsa, csa) = if trans_a { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    match dtype {
        Dtype::F64 => unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                0.0,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        },
        Dtype::F32 => {
            let a32: Vec<f32> = a.data.iter().map(|&x| x as f32).collect();
            let b32: Vec<f32> = b.data.iter().map(|&x| x as f32).collect();
            let mut c32 = vec![0.0f32; m * n];
            unsafe {
                matrixmultiply::sgemm(
                    m,
                    k,
                    n,
                    alpha as f32,
                    a32.as_ptr(),
                    rsa,
                    csa,
                    b32.as_ptr(),
                    rsb,
                    csb,
                    0.0,
                    c32.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            for (o, c) in out.data.iter_mut().zip(c32) {
                *o = c as f64;
            }
        }
    }
    Ok(out)
}
