//! Input-sparsity-time kernels: boosted sparse SVD, sketched dual-set sampling,
//! JLT-based adaptive sampling and the sparse-embedding subspace SVD.
//!
//! Every kernel reads sparse inputs entry by entry and only forms dense matrices at
//! sketch outputs. [`Instrument`] records both facts.

use crate::css::{bss_sampling, sample_by_weights, sigma_k_sq, top_left, AdaptiveSample, SamplingMatrix, SubspaceSvd};
use crate::error::{input, Error, Result};
use crate::matrix::{column_basis, qr, DenseMatrix, SparseColMatrix};
use crate::par::{map_indexed, ExecMode};
use crate::sketch::{SignSketch, SketchConstants, SketchSeed, SparseEmbedding};

/// Counters for entry touches and the largest dense buffer a kernel allocated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Instrument {
    pub touched: u64,
    pub dense_high_water: u64,
    pub sketch_applications: u64,
}

impl Instrument {
    fn touch(&mut self, a: &SparseColMatrix) {
        self.touched += a.nnz() as u64;
        self.sketch_applications += 1;
    }

    fn dense(&mut self, d: &DenseMatrix) {
        self.dense_high_water = self.dense_high_water.max((d.rows() * d.cols()) as u64);
    }

    pub fn merge(&mut self, o: &Instrument) {
        self.touched += o.touched;
        self.sketch_applications += o.sketch_applications;
        self.dense_high_water = self.dense_high_water.max(o.dense_high_water);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FastParams {
    pub k: usize,
    pub eps: f64,
    pub delta: f64,
    /// Candidate count `⌈log₂(1/δ)⌉ + 1`.
    pub r: usize,
    /// Sparse embedding rows `⌈2k²/ε²⌉`.
    pub xi: usize,
    pub beta: f64,
}

impl FastParams {
    pub fn new(k: usize, eps: f64, delta: f64) -> Result<Self> {
        if k == 0 {
            return input("k must be positive");
        }
        if !(eps > 0.0 && eps < 1.0) {
            return input(format!("eps = {eps} must lie in (0, 1)"));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return input(format!("delta = {delta} must lie in (0, 1)"));
        }
        Ok(Self {
            k,
            eps,
            delta,
            r: candidate_count(delta),
            xi: SketchConstants::default().sparse_embedding_dim(k, eps).max(k),
            beta: 1.0,
        })
    }
}

pub fn candidate_count(delta: f64) -> usize {
    (1.0 / delta).log2().ceil().max(0.0) as usize + 1
}

/// Seed of the `i`-th boosting or sampling candidate.
pub fn candidate_seed(seed: SketchSeed, i: usize) -> SketchSeed {
    seed.child(1000 + i as u32)
}

/// `S · A` for a sparse embedding `S` acting on the rows of sparse `A`.
fn embed_rows(s: &SparseEmbedding, a: &SparseColMatrix, ins: &mut Instrument) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(s.out_dim, a.cols());
    for (i, j, x) in a.iter_entries() {
        let v = if s.negative(i) { -x } else { x };
        out[(s.bucket(i), j)] += v;
    }
    ins.touch(a);
    ins.dense(&out);
    out
}

/// `G · S` for a sign sketch `G` (`r × m`) and sparse `A` (`m × n`).
fn sign_rows(g: &SignSketch, a: &SparseColMatrix, ins: &mut Instrument) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(g.out_dim, a.cols());
    for j in 0..a.cols() {
        let (r, v) = a.column(j);
        for (&i, &x) in r.iter().zip(v) {
            for p in 0..g.out_dim {
                out[(p, j)] += g.entry(p, i) * x;
            }
        }
    }
    ins.touch(a);
    ins.dense(&out);
    out
}

/// `Aᵀ W` for sparse `A` (`m × n`) and dense `W` (`m × k`).
fn t_mul(a: &SparseColMatrix, w: &DenseMatrix, ins: &mut Instrument) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(a.cols(), w.cols());
    for j in 0..a.cols() {
        let (r, v) = a.column(j);
        for q in 0..w.cols() {
            out[(j, q)] = r.iter().zip(v).map(|(&i, &x)| x * w[(i, q)]).sum();
        }
    }
    ins.touch(a);
    ins.dense(&out);
    out
}

/// Approximate top-`k` right singular space `Z` (`n × k`, orthonormal) of sparse `A`
/// by the two-sided sketch pipeline with sparse embeddings.
pub fn sparse_svd(a: &SparseColMatrix, k: usize, eps: f64, seed: SketchSeed) -> Result<DenseMatrix> {
    sparse_svd_counted(a, k, eps, seed, &mut Instrument::default())
}

pub fn sparse_svd_counted(
    a: &SparseColMatrix,
    k: usize,
    eps: f64,
    seed: SketchSeed,
    ins: &mut Instrument,
) -> Result<DenseMatrix> {
    let (m, n) = (a.rows(), a.cols());
    if k == 0 || k > m.min(n) {
        return input(format!("k = {k} must lie in 1..={}", m.min(n)));
    }
    let xi = SketchConstants::default().sparse_embedding_dim(k, eps).max(k);
    let s = SparseEmbedding::new(xi, m, seed.child(1));
    let t = SparseEmbedding::new(xi, n, seed.child(2));
    let sa = embed_rows(&s, a, ins);
    let sat = t.apply_cols(&sa);
    ins.dense(&sat);
    let p = top_left(&sat, k);
    let w = DenseMatrix::from_fn(m, k, |i, q| {
        let v = p[(s.bucket(i), q)];
        if s.negative(i) {
            -v
        } else {
            v
        }
    });
    let x = t_mul(a, &w, ins);
    let (z, _) = qr(&x)?;
    Ok(z)
}

/// `‖G·A − (G·A·Z) Zᵀ‖_F²`, the sketched residual score of a candidate.
fn score(ga: &DenseMatrix, z: &DenseMatrix) -> f64 {
    (ga - &(&(ga * z) * &z.t())).frob_sq()
}

/// Runs `⌈log₂(1/δ)⌉ + 1` independent [`sparse_svd`] candidates and keeps the one
/// with the smallest JLT-estimated residual.
pub fn sparse_svd_boosting(a: &SparseColMatrix, k: usize, eps: f64, delta: f64, seed: SketchSeed) -> Result<DenseMatrix> {
    sparse_svd_boosting_counted(a, k, eps, delta, seed, ExecMode::default(), &mut Instrument::default())
}

pub fn sparse_svd_boosting_counted(
    a: &SparseColMatrix,
    k: usize,
    eps: f64,
    delta: f64,
    seed: SketchSeed,
    exec: ExecMode,
    ins: &mut Instrument,
) -> Result<DenseMatrix> {
    if !(delta > 0.0 && delta < 1.0) {
        return input(format!("delta = {delta} must lie in (0, 1)"));
    }
    let r = candidate_count(delta);
    let runs = map_indexed(exec, r, |i| {
        let mut local = Instrument::default();
        let z = sparse_svd_counted(a, k, eps, candidate_seed(seed, i), &mut local);
        (z, local)
    });
    let mut cands = Vec::with_capacity(r);
    for (z, local) in runs {
        ins.merge(&local);
        cands.push(z?);
    }
    if r == 1 {
        return Ok(cands.pop().expect("one candidate"));
    }
    let g = SignSketch::jlt(a.cols(), a.rows(), 1.0, seed.child(999));
    let ga = sign_rows(&g, a, ins);
    let mut best = 0;
    let mut best_score = f64::INFINITY;
    for (i, z) in cands.iter().enumerate() {
        let sc = score(&ga, z);
        if sc < best_score {
            best = i;
            best_score = sc;
        }
    }
    Ok(cands.swap_remove(best))
}

/// Implicit residual `E = G − (G Z) Zᵀ` over a sparse `G`, never densified.
pub(crate) struct Residual<'a> {
    pub g: &'a SparseColMatrix,
    pub z: Option<&'a DenseMatrix>,
    gz: Option<DenseMatrix>,
}

impl<'a> Residual<'a> {
    pub fn new(g: &'a SparseColMatrix, z: Option<&'a DenseMatrix>, ins: &mut Instrument) -> Self {
        let gz = z.map(|z| g.mul_dense(z));
        if let Some(d) = &gz {
            ins.touch(g);
            ins.dense(d);
        }
        Self { g, z, gz }
    }

    pub fn cols(&self) -> usize {
        self.g.cols()
    }

    pub fn col_norm_sq(&self, j: usize) -> f64 {
        let (Some(z), Some(gz)) = (self.z, &self.gz) else {
            return self.g.col_norm_sq(j);
        };
        let mut col = vec![0.0; self.g.rows()];
        let (r, v) = self.g.column(j);
        for (&i, &x) in r.iter().zip(v) {
            col[i] = x;
        }
        for (i, c) in col.iter_mut().enumerate() {
            for q in 0..z.cols() {
                *c -= gz[(i, q)] * z[(j, q)];
            }
        }
        col.iter().map(|x| x * x).sum()
    }

    /// `W · E` for a sparse embedding `W` on the rows of `E`.
    pub fn embed(&self, w: &SparseEmbedding, ins: &mut Instrument) -> DenseMatrix {
        let wg = embed_rows(w, self.g, ins);
        match (self.z, &self.gz) {
            (Some(z), Some(gz)) => {
                let wgz = w.apply_rows(gz);
                &wg - &(&wgz * &z.t())
            }
            _ => wg,
        }
    }
}

/// Dual-set sampling on a sketched residual: `r` candidates each run
/// [`bss_sampling`] on `(V, W_i E)`; the first candidate ranked in the top `⌈2r/3⌉`
/// of both the spectral and the Frobenius lists is returned.
pub fn bss_sampling_sparse(
    v: &DenseMatrix,
    e: &SparseColMatrix,
    ell: usize,
    eps: f64,
    delta: f64,
    seed: SketchSeed,
) -> Result<SamplingMatrix> {
    let mut ins = Instrument::default();
    let res = Residual::new(e, None, &mut ins);
    bss_sparse_core(v, &res, ell, eps, delta, seed, &mut ins).map(|(s, _)| s)
}

/// Sorted positions of the chosen candidate in the spectral and Frobenius lists.
pub type ListPositions = (usize, usize);

pub(crate) fn bss_sparse_core(
    v: &DenseMatrix,
    e: &Residual<'_>,
    ell: usize,
    eps: f64,
    delta: f64,
    seed: SketchSeed,
    ins: &mut Instrument,
) -> Result<(SamplingMatrix, ListPositions)> {
    let (w, k) = v.shape();
    if e.cols() != w {
        return input(format!("E has {} columns, V has {w} rows", e.cols()));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return input(format!("eps = {eps} must lie in (0, 1)"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return input(format!("delta = {delta} must lie in (0, 1)"));
    }
    let r = candidate_count(delta);
    let xi = SketchConstants::default().sparse_embedding_dim(k.max(1), eps).max(1);
    let mut cands = Vec::with_capacity(r);
    for i in 0..r {
        let emb = SparseEmbedding::new(xi, e.g.rows(), candidate_seed(seed, i));
        let b = e.embed(&emb, ins);
        cands.push(bss_sampling(v, &b, ell)?);
    }
    let sig: Vec<f64> = cands.iter().map(|s| sigma_k_sq(v, s)).collect();
    let fro: Vec<f64> = cands
        .iter()
        .map(|s| {
            s.indices
                .iter()
                .zip(&s.weights)
                .map(|(&j, &wt)| wt * e.col_norm_sq(j))
                .sum()
        })
        .collect();
    let mut by_sig: Vec<usize> = (0..r).collect();
    by_sig.sort_by(|&a, &b| sig[b].total_cmp(&sig[a]).then(a.cmp(&b)));
    let mut by_fro: Vec<usize> = (0..r).collect();
    by_fro.sort_by(|&a, &b| fro[a].total_cmp(&fro[b]).then(a.cmp(&b)));
    let cut = (2 * r).div_ceil(3);
    let pos = |list: &[usize], i: usize| list.iter().position(|&x| x == i).expect("permutation");
    let Some(pick) = (0..r).find(|&i| pos(&by_sig, i) < cut && pos(&by_fro, i) < cut) else {
        return Err(Error::Internal("no candidate ranks high in both lists".into()));
    };
    let positions = (pos(&by_sig, pick) + 1, pos(&by_fro, pick) + 1);
    let total: f64 = (0..w).map(|j| e.col_norm_sq(j)).sum();
    let chosen = cands.swap_remove(pick);
    let floor = (1.0 - (k as f64 / ell as f64).sqrt()).powi(2);
    if sig[pick] < floor * (1.0 - 1e-9) {
        return Err(Error::Internal(format!("spectral bound violated: {} < {floor}", sig[pick])));
    }
    let cap = ((1.0 + eps) / (1.0 - eps)).powi(2) * total;
    if fro[pick] > cap * (1.0 + 1e-9) + 1e-300 {
        return Err(Error::Internal(format!("Frobenius bound violated: {} > {cap}", fro[pick])));
    }
    Ok((chosen, positions))
}

/// Accuracy and failure budget of the boosted SVD inside [`deterministic_css_sparse`].
pub const CSS_SPARSE_EPS: f64 = 0.5;
pub const CSS_SPARSE_DELTA: f64 = 0.1;

/// Picks `c` columns of sparse `G`: boosted sparse SVD for `Z`, then sketched
/// dual-set sampling on `(Z, G − G Z Zᵀ)`, padded with the largest residual columns.
pub fn deterministic_css_sparse(g: &SparseColMatrix, k: usize, c: usize, seed: SketchSeed) -> Result<Vec<usize>> {
    css_sparse_counted(g, k, c, seed, ExecMode::default(), &mut Instrument::default())
}

pub fn css_sparse_counted(
    g: &SparseColMatrix,
    k: usize,
    c: usize,
    seed: SketchSeed,
    exec: ExecMode,
    ins: &mut Instrument,
) -> Result<Vec<usize>> {
    let (m, a) = (g.rows(), g.cols());
    if c <= k {
        return input(format!("c = {c} must exceed k = {k}"));
    }
    if c >= a {
        return Ok((0..a).collect());
    }
    if k > m.min(a) {
        return input(format!("k = {k} must lie in 1..={}", m.min(a)));
    }
    let z = sparse_svd_boosting_counted(g, k, CSS_SPARSE_EPS, CSS_SPARSE_DELTA, seed.child(1), exec, ins)?;
    let res = Residual::new(g, Some(&z), ins);
    let (s, _) = bss_sparse_core(&z, &res, c, CSS_SPARSE_EPS, CSS_SPARSE_DELTA, seed.child(2), ins)?;
    let mut idx = s.indices;
    if idx.len() < c {
        let mut rest: Vec<(usize, f64)> = (0..a)
            .filter(|j| !idx.contains(j))
            .map(|j| (j, res.col_norm_sq(j)))
            .collect();
        rest.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        let need = c - idx.len();
        idx.extend(rest.into_iter().take(need).map(|(j, _)| j));
    }
    Ok(idx)
}

/// Column norms of `Ψ̃ = G (A − Y Yᵀ A)` for a JLT `G` and an orthonormal `Y`.
pub fn jlt_residual_norms(a: &SparseColMatrix, y: &DenseMatrix, g: &SignSketch, ins: &mut Instrument) -> Vec<f64> {
    let ga = sign_rows(g, a, ins);
    let psi = if y.cols() == 0 {
        ga
    } else {
        let yta = t_mul(a, y, ins).t();
        let gy = g.apply(y);
        &ga - &(&gy * &yta)
    };
    (0..psi.cols()).map(|j| psi.col_norm_sq(j)).collect()
}

/// Adaptive sampling with probabilities from the JLT-compressed residual.
pub fn adaptive_cols_sparse(
    a: &SparseColMatrix,
    v: &DenseMatrix,
    c2: usize,
    beta: f64,
    seed: SketchSeed,
) -> Result<AdaptiveSample> {
    if !(beta > 0.0 && beta <= 1.0) {
        return input(format!("beta = {beta} must lie in (0, 1]"));
    }
    if v.rows() != a.rows() {
        return input("V must have as many rows as A");
    }
    let y = if v.cols() == 0 { v.clone() } else { column_basis(v).0 };
    let g = SignSketch::jlt(a.cols(), a.rows(), 1.0, seed.child(1));
    let norms = jlt_residual_norms(a, &y, &g, &mut Instrument::default());
    let residual: f64 = norms.iter().sum();
    if residual <= 1e-24 {
        return Ok(AdaptiveSample {
            indices: Vec::new(),
            residual,
            empty: true,
        });
    }
    Ok(AdaptiveSample {
        indices: sample_by_weights(&norms, c2, seed.child(2)),
        residual,
        empty: false,
    })
}

/// `Yᵀ A Wᵀ` restricted to the buckets of `W` that some column of `A` lands in.
pub fn compact_subspace_sketch(
    a: &SparseColMatrix,
    y: &DenseMatrix,
    w: &SparseEmbedding,
    offset: usize,
    buckets: &[usize],
    ins: &mut Instrument,
) -> DenseMatrix {
    let mut slot = vec![usize::MAX; w.out_dim];
    for (p, &b) in buckets.iter().enumerate() {
        slot[b] = p;
    }
    let mut out = DenseMatrix::zeros(y.cols(), buckets.len());
    for j in 0..a.cols() {
        let col = slot[w.bucket(offset + j)];
        let sign = if w.negative(offset + j) { -1.0 } else { 1.0 };
        let (r, v) = a.column(j);
        for q in 0..y.cols() {
            let d: f64 = r.iter().zip(v).map(|(&i, &x)| y[(i, q)] * x).sum();
            out[(q, col)] += sign * d;
        }
    }
    ins.touch(a);
    ins.dense(&out);
    out
}

/// Sparse-embedding width for the restricted SVD: `⌈2c²/ε²⌉`.
pub fn subspace_embedding_dim(c: usize, eps: f64) -> usize {
    SketchConstants::default().sparse_embedding_dim(c, eps)
}

/// Restricted SVD with a sparse subspace embedding; only occupied buckets are formed.
pub fn approx_subspace_svd_sparse(
    a: &SparseColMatrix,
    v: &DenseMatrix,
    k: usize,
    eps: f64,
    seed: SketchSeed,
) -> Result<SubspaceSvd> {
    if v.rows() != a.rows() {
        return input("V must have as many rows as A");
    }
    if !(eps > 0.0 && eps < 1.0) {
        return input(format!("eps = {eps} must lie in (0, 1)"));
    }
    let (y, _) = column_basis(v);
    if k > y.cols() {
        return input(format!("k = {k} exceeds the rank {} of V", y.cols()));
    }
    let w = SparseEmbedding::new(subspace_embedding_dim(v.cols(), eps), a.cols(), seed);
    let buckets = w.occupied();
    let xi = compact_subspace_sketch(a, &y, &w, 0, &buckets, &mut Instrument::default());
    let delta = top_left(&xi, k);
    Ok(SubspaceSvd { y, delta })
}

/// Frobenius norm of `E S` for sparse `E`.
pub fn frob_sampled_sparse_sq(e: &SparseColMatrix, s: &SamplingMatrix) -> f64 {
    s.indices.iter().zip(&s.weights).map(|(&j, &w)| w * e.col_norm_sq(j)).sum()
}
