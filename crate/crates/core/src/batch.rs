//! Two-sided sketch low-rank approximation on a single machine.

use crate::error::{input, Result};
use crate::exact::{exact_mul, ExactMatrix, SignTable};
use crate::matrix::{numeric_rank, qr, truncated_svd, DenseMatrix};
use crate::sketch::{SignSketch, SketchConstants, SketchSeed};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchParams {
    pub k: usize,
    pub eps: f64,
    pub xi1: Option<usize>,
    pub xi2: Option<usize>,
    pub seed: u64,
    pub constants: SketchConstants,
}

impl BatchParams {
    pub fn new(k: usize, eps: f64, seed: u64) -> Self {
        Self {
            k,
            eps,
            xi1: None,
            xi2: None,
            seed,
            constants: SketchConstants::default(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        let d = self.constants.dense_jl_dim(self.k, self.eps);
        (self.xi1.unwrap_or(d), self.xi2.unwrap_or(d))
    }
}

#[derive(Clone, Debug)]
pub struct BatchResult {
    pub u: DenseMatrix,
    pub rank_deficient: bool,
    pub xi1: usize,
    pub xi2: usize,
}

/// Left (`ξ1 × m`) and right (`ξ2 × n`, applied transposed) sign sketches for `seed`.
pub fn two_sided_sketches(seed: u64, m: usize, n: usize, xi1: usize, xi2: usize) -> (SignSketch, SignSketch) {
    let root = SketchSeed::new(seed, 0);
    (
        SignSketch::new(xi1, m, root.child(1)),
        SignSketch::new(xi2, n, root.child(2)),
    )
}

/// Exact `sign(S) · A · sign(T)` without scales; `t_t` is the `n × ξ2` pattern.
pub(crate) fn sketch_exact(s: &SignTable, t_t: &SignTable, a: &DenseMatrix) -> ExactMatrix {
    s.left_apply_exact(&t_t.right_apply(a))
}

/// `T · V` with `T` given by its `n × ξ2` pattern.
pub(crate) fn lift(t_t: &SignTable, v: &DenseMatrix) -> DenseMatrix {
    t_t.left_apply(v).round_scaled(t_t.scale)
}

/// Orthonormal `m × k` basis of `X`, and whether `X` fell short of rank `k`.
pub(crate) fn basis_of(x: &DenseMatrix, k: usize) -> Result<(DenseMatrix, bool)> {
    let (q, _) = qr(x)?;
    Ok((q, numeric_rank(x, None) < k))
}

pub(crate) fn check_k(k: usize, eps: f64, m: usize, n: usize) -> Result<()> {
    if k == 0 || k > m.min(n) {
        return input(format!("k = {k} must lie in 1..={}", m.min(n)));
    }
    if !(eps > 0.0 && eps <= 1.0) {
        return input(format!("eps = {eps} must lie in (0, 1]"));
    }
    Ok(())
}

/// `Ã = S A T`, `V` = top-`k` right singular vectors of `Ã`, `U` = orthonormal basis of `A T V`.
pub fn batch_low_rank(a: &DenseMatrix, p: &BatchParams) -> Result<BatchResult> {
    let (m, n) = a.shape();
    check_k(p.k, p.eps, m, n)?;
    let (xi1, xi2) = p.dims();
    if p.k > xi1.min(xi2) {
        return input(format!("k = {} exceeds sketch sizes {xi1}, {xi2}", p.k));
    }
    let (s, t) = two_sided_sketches(p.seed, m, n, xi1, xi2);
    let (s_tab, t_tab) = (s.table(), t.table_t());
    let at = sketch_exact(&s_tab, &t_tab, a).round_scaled(s_tab.scale * t_tab.scale);
    let (f, _) = truncated_svd(&at, p.k)?;
    let w = lift(&t_tab, &f.v);
    let x = exact_mul(a, &w).round();
    let (u, rank_deficient) = basis_of(&x, p.k)?;
    Ok(BatchResult {
        u,
        rank_deficient,
        xi1,
        xi2,
    })
}
