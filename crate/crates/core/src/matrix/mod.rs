//! Dense and sparse matrix types plus the factorizations the protocols build on.

mod decomp;
pub mod mm;

pub use decomp::*;

use crate::error::{input, shape, Error, Result};
use nalgebra::DMatrix;
use std::ops::{Add, Index, IndexMut, Mul, Sub};

/// Dense real matrix. Storage is delegated to nalgebra; construction goes through
/// row-major slices and rejects non-finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix(DMatrix<f64>);

impl DenseMatrix {
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape(format!(
                "{} values supplied for a {rows}x{cols} matrix",
                data.len()
            ));
        }
        if let Some(p) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: p / cols.max(1),
                col: p % cols.max(1),
            });
        }
        Ok(Self(DMatrix::from_row_slice(rows, cols, &data)))
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl FnMut(usize, usize) -> f64) -> Self {
        Self(DMatrix::from_fn(rows, cols, f))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self(DMatrix::zeros(rows, cols))
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn from_na(m: DMatrix<f64>) -> Self {
        Self(m)
    }

    pub fn as_na(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_na(self) -> DMatrix<f64> {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    /// Checks every entry is finite.
    pub fn validate(&self) -> Result<()> {
        for j in 0..self.cols() {
            for i in 0..self.rows() {
                if !self.0[(i, j)].is_finite() {
                    return Err(Error::NonFinite { row: i, col: j });
                }
            }
        }
        Ok(())
    }

    pub fn t(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn scale(&self, c: f64) -> Self {
        Self(&self.0 * c)
    }

    pub fn frob_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn frob(&self) -> f64 {
        self.frob_sq().sqrt()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.0.column(j).iter().copied().collect()
    }

    pub fn col_norm_sq(&self, j: usize) -> f64 {
        self.0.column(j).iter().map(|v| v * v).sum()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.0.row(i).iter().copied().collect()
    }

    pub fn select_cols(&self, idx: &[usize]) -> Self {
        Self::from_fn(self.rows(), idx.len(), |i, j| self.0[(i, idx[j])])
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self::from_fn(idx.len(), self.cols(), |i, j| self.0[(idx[i], j)])
    }

    /// First `k` columns.
    pub fn leading_cols(&self, k: usize) -> Self {
        Self(self.0.columns(0, k).into_owned())
    }

    pub fn hcat(blocks: &[&DenseMatrix]) -> Result<Self> {
        let rows = blocks.first().map_or(0, |b| b.rows());
        if blocks.iter().any(|b| b.rows() != rows) {
            return shape("hcat blocks disagree on row count");
        }
        let cols: usize = blocks.iter().map(|b| b.cols()).sum();
        let mut out = DMatrix::zeros(rows, cols);
        let mut off = 0;
        for b in blocks {
            out.columns_mut(off, b.cols()).copy_from(&b.0);
            off += b.cols();
        }
        Ok(Self(out))
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.rows() * self.cols());
        for i in 0..self.rows() {
            for j in 0..self.cols() {
                v.push(self.0[(i, j)]);
            }
        }
        v
    }

    /// Bit-for-bit equality, distinguishing signed zeros.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self
                .0
                .iter()
                .zip(other.0.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn dot(&self, other: &Self) -> Result<Self> {
        if self.cols() != other.rows() {
            return shape(format!(
                "cannot multiply {:?} by {:?}",
                self.shape(),
                other.shape()
            ));
        }
        Ok(Self(&self.0 * &other.0))
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, ij: (usize, usize)) -> &f64 {
        &self.0[ij]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, ij: (usize, usize)) -> &mut f64 {
        &mut self.0[ij]
    }
}

impl Mul for &DenseMatrix {
    type Output = DenseMatrix;
    fn mul(self, rhs: &DenseMatrix) -> DenseMatrix {
        DenseMatrix(&self.0 * &rhs.0)
    }
}

impl Add for &DenseMatrix {
    type Output = DenseMatrix;
    fn add(self, rhs: &DenseMatrix) -> DenseMatrix {
        DenseMatrix(&self.0 + &rhs.0)
    }
}

impl Sub for &DenseMatrix {
    type Output = DenseMatrix;
    fn sub(self, rhs: &DenseMatrix) -> DenseMatrix {
        DenseMatrix(&self.0 - &rhs.0)
    }
}

/// Compressed sparse column matrix. Row indices are strictly increasing within a
/// column and stored values are nonzero.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseColMatrix {
    rows: usize,
    cols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseColMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        col_ptr: Vec<usize>,
        row_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if col_ptr.len() != cols + 1 || col_ptr[0] != 0 {
            return input("column pointer array has the wrong length or start");
        }
        if row_idx.len() != values.len() || *col_ptr.last().unwrap() != values.len() {
            return input("index and value arrays disagree in length");
        }
        for j in 0..cols {
            if col_ptr[j + 1] < col_ptr[j] {
                return input(format!("column pointer decreases at column {j}"));
            }
            let r = &row_idx[col_ptr[j]..col_ptr[j + 1]];
            for (t, &i) in r.iter().enumerate() {
                if i >= rows {
                    return input(format!("row index {i} out of range in column {j}"));
                }
                if t > 0 && r[t - 1] >= i {
                    return input(format!("row indices not strictly increasing in column {j}"));
                }
                let v = values[col_ptr[j] + t];
                if !v.is_finite() {
                    return Err(Error::NonFinite { row: i, col: j });
                }
                if v == 0.0 {
                    return input(format!("explicit zero stored at ({i}, {j})"));
                }
            }
        }
        Ok(Self {
            rows,
            cols,
            col_ptr,
            row_idx,
            values,
        })
    }

    /// Builds from (row, col, value) triplets; duplicates are summed and zeros dropped.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut t: Vec<(usize, usize, f64)> = triplets.to_vec();
        for &(i, j, v) in &t {
            if i >= rows || j >= cols {
                return input(format!("entry ({i}, {j}) outside a {rows}x{cols} matrix"));
            }
            if !v.is_finite() {
                return Err(Error::NonFinite { row: i, col: j });
            }
        }
        t.sort_by_key(|e| (e.1, e.0));
        let mut col_ptr = vec![0usize; cols + 1];
        let mut row_idx = Vec::with_capacity(t.len());
        let mut values = Vec::with_capacity(t.len());
        let mut k = 0;
        while k < t.len() {
            let (i, j, mut v) = t[k];
            k += 1;
            while k < t.len() && t[k].0 == i && t[k].1 == j {
                v += t[k].2;
                k += 1;
            }
            if v != 0.0 {
                row_idx.push(i);
                values.push(v);
                col_ptr[j + 1] += 1;
            }
        }
        for j in 0..cols {
            col_ptr[j + 1] += col_ptr[j];
        }
        Self::new(rows, cols, col_ptr, row_idx, values)
    }

    pub fn from_dense(a: &DenseMatrix) -> Self {
        let mut col_ptr = vec![0usize];
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        for j in 0..a.cols() {
            for i in 0..a.rows() {
                let v = a[(i, j)];
                if v != 0.0 {
                    row_idx.push(i);
                    values.push(v);
                }
            }
            col_ptr.push(values.len());
        }
        Self {
            rows: a.rows(),
            cols: a.cols(),
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for j in 0..self.cols {
            let (r, v) = self.column(j);
            for (&i, &x) in r.iter().zip(v) {
                out[(i, j)] = x;
            }
        }
        out
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

    pub fn column(&self, j: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.col_ptr[j], self.col_ptr[j + 1]);
        (&self.row_idx[a..b], &self.values[a..b])
    }

    pub fn col_nnz(&self, j: usize) -> usize {
        self.col_ptr[j + 1] - self.col_ptr[j]
    }

    /// Largest number of nonzeros in any column (the sparsity parameter φ).
    pub fn max_col_nnz(&self) -> usize {
        (0..self.cols).map(|j| self.col_nnz(j)).max().unwrap_or(0)
    }

    /// Words needed to ship column `j`: an index and a value per nonzero plus a header.
    pub fn col_cost(&self, j: usize) -> u64 {
        2 * self.col_nnz(j) as u64 + 1
    }

    pub fn col_norm_sq(&self, j: usize) -> f64 {
        self.column(j).1.iter().map(|v| v * v).sum()
    }

    pub fn frob_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn select_cols(&self, idx: &[usize]) -> Self {
        let mut col_ptr = vec![0usize];
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        for &j in idx {
            let (r, v) = self.column(j);
            row_idx.extend_from_slice(r);
            values.extend_from_slice(v);
            col_ptr.push(values.len());
        }
        Self {
            rows: self.rows,
            cols: idx.len(),
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn hcat(blocks: &[&SparseColMatrix]) -> Result<Self> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        if blocks.iter().any(|b| b.rows != rows) {
            return shape("hcat blocks disagree on row count");
        }
        let mut col_ptr = vec![0usize];
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        for b in blocks {
            for j in 0..b.cols {
                let (r, v) = b.column(j);
                row_idx.extend_from_slice(r);
                values.extend_from_slice(v);
                col_ptr.push(values.len());
            }
        }
        Ok(Self {
            rows,
            cols: col_ptr.len() - 1,
            col_ptr,
            row_idx,
            values,
        })
    }

    /// Contiguous column range `[start, start + len)`.
    pub fn col_range(&self, start: usize, len: usize) -> Self {
        let idx: Vec<usize> = (start..start + len).collect();
        self.select_cols(&idx)
    }

    /// `B · self` for dense `B` with `self.rows()` columns.
    pub fn left_mul_dense(&self, b: &DenseMatrix) -> DenseMatrix {
        assert_eq!(b.cols(), self.rows);
        let mut out = DenseMatrix::zeros(b.rows(), self.cols);
        for j in 0..self.cols {
            let (r, v) = self.column(j);
            for p in 0..b.rows() {
                let mut acc = 0.0;
                for (&i, &x) in r.iter().zip(v) {
                    acc += b[(p, i)] * x;
                }
                out[(p, j)] = acc;
            }
        }
        out
    }

    /// `self · B` for dense `B` with `self.cols()` rows.
    pub fn mul_dense(&self, b: &DenseMatrix) -> DenseMatrix {
        assert_eq!(b.rows(), self.cols);
        let mut out = DenseMatrix::zeros(self.rows, b.cols());
        for j in 0..self.cols {
            let (r, v) = self.column(j);
            for q in 0..b.cols() {
                let w = b[(j, q)];
                if w == 0.0 {
                    continue;
                }
                for (&i, &x) in r.iter().zip(v) {
                    out[(i, q)] += x * w;
                }
            }
        }
        out
    }

    pub fn iter_entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.cols).flat_map(move |j| {
            let (r, v) = self.column(j);
            r.iter().zip(v).map(move |(&i, &x)| (i, j, x))
        })
    }
}
