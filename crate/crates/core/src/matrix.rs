//! Row-major dense `f64` matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "DenseMatrix::new",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::dim(format!("from_rows row {i}"), cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// A single-column matrix.
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn expect_same_shape(&self, other: &Self, context: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                context,
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::dim("matmul inner dimension", self.cols, other.rows));
        }
        let (k, m) = (self.cols, other.cols);
        let mut out = Self::zeros(self.rows, m);
        gemm(&mut out, k, |r| (&self.data[r * k..], k as isize, 1), (&other.data, m as isize, 1));
        Ok(out)
    }

    /// `selfᵀ · other`, without materialising the transpose.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::dim("t_matmul shared rows", self.rows, other.rows));
        }
        let (k, m) = (self.cols, other.cols);
        let mut out = Self::zeros(k, m);
        gemm(
            &mut out,
            self.rows,
            |r| (&self.data[r..], 1, k as isize),
            (&other.data, m as isize, 1),
        );
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::dim("matmul_t shared cols", self.cols, other.cols));
        }
        let k = self.cols;
        let mut out = Self::zeros(self.rows, other.rows);
        gemm(&mut out, k, |r| (&self.data[r * k..], k as isize, 1), (&other.data, 1, k as isize));
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// `self += s * other`.
    pub fn add_scaled_assign(&mut self, other: &Self, s: f64) -> Result<()> {
        self.expect_same_shape(other, "add_scaled_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        out
    }

    pub fn column_means(&self) -> Vec<f64> {
        let n = self.rows.max(1) as f64;
        self.column_sums().into_iter().map(|s| s / n).collect()
    }

    /// Copies the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Appends the rows of `other` below `self`.
    pub fn vstack(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols && self.rows != 0 && other.rows != 0 {
            return Err(Error::dim("vstack cols", self.cols, other.cols));
        }
        let cols = if self.rows == 0 { other.cols } else { self.cols };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            rows: self.rows + other.rows,
            cols,
            data,
        })
    }

    /// Largest absolute elementwise difference; `inf` when shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Output rows per GEMM call. Blocks are fixed-size so every output element is
/// computed by the same kernel invocation shape whether blocks run in
/// parallel or not.
const GEMM_ROW_BLOCK: usize = 64;

type Strided<'a> = (&'a [f64], isize, isize);

/// `out = A · B` where `a_at(r)` yields A starting at output row `r`, and
/// `inner` is the shared dimension.
fn gemm<'a>(out: &mut DenseMatrix, inner: usize, a_at: impl Fn(usize) -> Strided<'a> + Sync + Send, b: Strided<'_>) {
    let (rows, cols) = out.shape();
    if rows == 0 || cols == 0 || inner == 0 {
        return;
    }
    let (b_data, rsb, csb) = b;
    let b_ptr = b_data.as_ptr() as usize;
    par::for_each_row_mut(&mut out.data, GEMM_ROW_BLOCK * cols, |block, chunk| {
        let r0 = block * GEMM_ROW_BLOCK;
        let m = chunk.len() / cols;
        let (a_data, rsa, csa) = a_at(r0);
        // SAFETY: callers pass slices that start at the block's first row and
        // cover `m x inner` (resp. `inner x cols`) with the given strides;
        // `chunk` is exactly `m x cols` and contiguous.
        unsafe {
            matrixmultiply::dgemm(
                m,
                inner,
                cols,
                1.0,
                a_data.as_ptr(),
                rsa,
                csa,
                b_ptr as *const f64,
                rsb,
                csb,
                0.0,
                chunk.as_mut_ptr(),
                cols as isize,
                1,
            );
        }
    });
}
