//! Error-free accumulation.
//!
//! Sketch entries are sums of many signed terms. Accumulating them as
//! non-overlapping expansions and rounding once at the end makes every sketch a
//! function of the exact sum only, so splitting the input across machines or
//! stream updates never changes a single bit of the rounded result.

use crate::matrix::DenseMatrix;
use smallvec::SmallVec;

/// Exact running sum of `f64` terms stored as a non-overlapping expansion.
#[derive(Clone, Debug, Default)]
pub struct ExactSum {
    partials: SmallVec<[f64; 3]>,
}

impl ExactSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        if x == 0.0 {
            return;
        }
        let mut x = x;
        let mut i = 0;
        let p = self.partials.as_mut_slice();
        for j in 0..p.len() {
            let y = p[j];
            let hi = x + y;
            let yv = hi - x;
            let lo = (x - (hi - yv)) + (y - yv);
            p[i] = lo;
            i += usize::from(lo != 0.0);
            x = hi;
        }
        self.partials.truncate(i);
        if x != 0.0 {
            self.partials.push(x);
        }
    }

    /// Adds the exact product `a * b`.
    pub fn add_product(&mut self, a: f64, b: f64) {
        let p = a * b;
        let e = a.mul_add(b, -p);
        self.add(p);
        self.add(e);
    }

    /// Adds `sign * x` where `sign` is ±1.
    #[inline]
    pub fn add_signed(&mut self, negative: bool, x: f64) {
        self.add(if negative { -x } else { x });
    }

    pub fn merge(&mut self, other: &ExactSum) {
        for &p in &other.partials {
            self.add(p);
        }
    }

    pub fn merge_signed(&mut self, negative: bool, other: &ExactSum) {
        for &p in &other.partials {
            self.add_signed(negative, p);
        }
    }

    /// Adds `c * other` exactly.
    pub fn merge_scaled(&mut self, c: f64, other: &ExactSum) {
        for &p in &other.partials {
            self.add_product(c, p);
        }
    }

    pub fn partials(&self) -> &[f64] {
        &self.partials
    }

    /// Correctly rounded value of the sum; an exact zero is returned as `+0.0`.
    pub fn value(&self) -> f64 {
        let p = &self.partials;
        let mut n = p.len();
        if n == 0 {
            return 0.0;
        }
        n -= 1;
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            let yr = x - hi;
            if y == yr {
                hi = x;
            }
        }
        if hi == 0.0 {
            0.0
        } else {
            hi
        }
    }
}

/// Row-major matrix of exact accumulators.
#[derive(Clone, Debug)]
pub struct ExactMatrix {
    rows: usize,
    cols: usize,
    cells: Vec<ExactSum>,
}

impl ExactMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            cells: vec![ExactSum::new(); rows * cols],
        }
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

    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> &ExactSum {
        &self.cells[i * self.cols + j]
    }

    #[inline]
    pub fn cell_mut(&mut self, i: usize, j: usize) -> &mut ExactSum {
        &mut self.cells[i * self.cols + j]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [ExactSum] {
        &mut self.cells[i * self.cols..(i + 1) * self.cols]
    }

    pub fn merge(&mut self, other: &ExactMatrix) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            a.merge(b);
        }
    }

    /// Correctly rounded entries, each multiplied by `scale` afterwards.
    pub fn round_scaled(&self, scale: f64) -> DenseMatrix {
        DenseMatrix::from_fn(self.rows, self.cols, |i, j| self.cell(i, j).value() * scale)
    }

    pub fn round(&self) -> DenseMatrix {
        self.round_scaled(1.0)
    }

    /// Number of stored partials, a proxy for memory use.
    pub fn partial_count(&self) -> usize {
        self.cells.iter().map(|c| c.partials.len()).sum()
    }
}

/// Sign pattern with a common scale: entry `(i, j)` equals `scale * (±1)`.
#[derive(Clone, Debug)]
pub struct SignTable {
    rows: usize,
    cols: usize,
    negative: Vec<bool>,
    pub scale: f64,
}

impl SignTable {
    pub fn from_fn(rows: usize, cols: usize, scale: f64, mut neg: impl FnMut(usize, usize) -> bool) -> Self {
        let mut negative = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                negative.push(neg(i, j));
            }
        }
        Self {
            rows,
            cols,
            negative,
            scale,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn neg(&self, i: usize, j: usize) -> bool {
        self.negative[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.negative[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> SignTable {
        SignTable::from_fn(self.cols, self.rows, self.scale, |i, j| self.neg(j, i))
    }

    pub fn to_dense(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.rows, self.cols, |i, j| {
            if self.neg(i, j) {
                -self.scale
            } else {
                self.scale
            }
        })
    }

    /// Exact `A · sign(self)` (scale not applied). `self` is `A.cols() × w`.
    pub fn right_apply(&self, a: &DenseMatrix) -> ExactMatrix {
        assert_eq!(a.cols(), self.rows);
        let mut out = ExactMatrix::zeros(a.rows(), self.cols);
        for r in 0..a.rows() {
            let row = out.row_mut(r);
            for j in 0..self.rows {
                let x = a[(r, j)];
                if x == 0.0 {
                    continue;
                }
                for (cell, &neg) in row.iter_mut().zip(self.row(j)) {
                    cell.add_signed(neg, x);
                }
            }
        }
        out
    }

    /// Exact `sign(self) · X` for an exact matrix `X` (scale not applied).
    pub fn left_apply_exact(&self, x: &ExactMatrix) -> ExactMatrix {
        assert_eq!(x.rows(), self.cols);
        let mut out = ExactMatrix::zeros(self.rows, x.cols());
        for p in 0..self.rows {
            for r in 0..self.cols {
                let neg = self.neg(p, r);
                for q in 0..x.cols() {
                    let src = x.cell(r, q);
                    out.cell_mut(p, q).merge_signed(neg, src);
                }
            }
        }
        out
    }

    /// Exact `sign(self) · A` for dense `A` (scale not applied).
    pub fn left_apply(&self, a: &DenseMatrix) -> ExactMatrix {
        assert_eq!(a.rows(), self.cols);
        let mut out = ExactMatrix::zeros(self.rows, a.cols());
        for p in 0..self.rows {
            let row = out.row_mut(p);
            for r in 0..self.cols {
                let neg = self.neg(p, r);
                for (q, cell) in row.iter_mut().enumerate() {
                    let x = a[(r, q)];
                    if x != 0.0 {
                        cell.add_signed(neg, x);
                    }
                }
            }
        }
        out
    }
}

/// Exact `A · W` for dense real matrices.
pub fn exact_mul(a: &DenseMatrix, w: &DenseMatrix) -> ExactMatrix {
    assert_eq!(a.cols(), w.rows());
    let mut out = ExactMatrix::zeros(a.rows(), w.cols());
    for r in 0..a.rows() {
        let row = out.row_mut(r);
        for j in 0..a.cols() {
            let x = a[(r, j)];
            if x == 0.0 {
                continue;
            }
            for (q, cell) in row.iter_mut().enumerate() {
                cell.add_product(x, w[(j, q)]);
            }
        }
    }
    out
}

/// Exact `C · X` for dense `C` and exact `X`.
pub fn exact_left_mul(c: &DenseMatrix, x: &ExactMatrix) -> ExactMatrix {
    assert_eq!(c.cols(), x.rows());
    let mut out = ExactMatrix::zeros(c.rows(), x.cols());
    for p in 0..c.rows() {
        for r in 0..c.cols() {
            let w = c[(p, r)];
            if w == 0.0 {
                continue;
            }
            for q in 0..x.cols() {
                let src = x.cell(r, q);
                out.cell_mut(p, q).merge_scaled(w, src);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cancellation_is_exact() {
        let mut s = ExactSum::new();
        for x in [1e100, 1.0, -1e100, 1e-100] {
            s.add(x);
        }
        assert_eq!(s.value(), 1.0 + 1e-100);
        let mut z = ExactSum::new();
        z.add(0.1);
        z.add(-0.1);
        assert_eq!(z.value().to_bits(), 0.0f64.to_bits());
    }

    #[test]
    fn rounding_is_correct_on_ties() {
        // 1 + 2^-53 is a tie; the extra 2^-105 pushes it up.
        let mut s = ExactSum::new();
        s.add(1.0);
        s.add(2f64.powi(-53));
        s.add(2f64.powi(-105));
        assert_eq!(s.value(), 1.0 + f64::EPSILON);
        let mut t = ExactSum::new();
        t.add(1.0);
        t.add(2f64.powi(-53));
        assert_eq!(t.value(), 1.0);
    }

    #[test]
    fn products_are_exact() {
        let a = 1.0 + f64::EPSILON;
        let mut s = ExactSum::new();
        s.add_product(a, a);
        s.add(-1.0);
        s.add(-2.0 * f64::EPSILON);
        assert_eq!(s.value(), f64::EPSILON * f64::EPSILON);
    }

    #[test]
    fn order_does_not_matter() {
        let xs: Vec<f64> = (0..200).map(|i| ((i * 7919) % 1000) as f64 * 1.37e-3 - 0.6).collect();
        let mut fwd = ExactSum::new();
        let mut rev = ExactSum::new();
        xs.iter().for_each(|&x| fwd.add(x));
        xs.iter().rev().for_each(|&x| rev.add(x));
        assert_eq!(fwd.value().to_bits(), rev.value().to_bits());
    }

    #[test]
    fn sign_table_products_match_dense() {
        let t = SignTable::from_fn(3, 4, 0.5, |i, j| (i + 2 * j) % 3 == 0);
        let a = DenseMatrix::from_fn(2, 3, |i, j| (i * 3 + j) as f64 - 2.5);
        let got = t.right_apply(&a).round_scaled(t.scale);
        let want = &a * &t.to_dense();
        assert!(got.max_abs_diff(&want) < 1e-14);
        let tt = t.transpose();
        let two_sided = SignTable::from_fn(2, 2, 1.0, |i, j| i == j)
            .left_apply_exact(&t.right_apply(&a))
            .round_scaled(t.scale);
        let dense_two = &(&SignTable::from_fn(2, 2, 1.0, |i, j| i == j).to_dense() * &a) * &t.to_dense();
        assert!(two_sided.max_abs_diff(&dense_two) < 1e-14);
        let b = DenseMatrix::from_fn(3, 2, |i, j| (i + j) as f64 * 0.25);
        let l = tt.left_apply(&b).round_scaled(tt.scale);
        assert!(l.max_abs_diff(&(&tt.to_dense() * &b)) < 1e-14);
    }
}
