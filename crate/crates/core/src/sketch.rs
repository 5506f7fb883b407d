//! Seeded random sketches: dense signs, SRHT, sparse embeddings and JL transforms.
//!
//! Every random entry is a pure function of `(seed, stream_id, i, j)`, so any party
//! holding a `SketchSeed` regenerates identical matrices without storing them.

use crate::error::{input, Result};
use crate::exact::SignTable;
use crate::matrix::{DenseMatrix, SparseColMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SketchSeed {
    pub seed: u64,
    pub stream_id: u32,
}

impl SketchSeed {
    pub fn new(seed: u64, stream_id: u32) -> Self {
        Self { seed, stream_id }
    }

    /// Counter-based pseudo-random word at position `(i, j)`.
    #[inline]
    pub fn word(&self, i: u64, j: u64) -> u64 {
        let h = mix64(self.seed ^ mix64(self.stream_id as u64 ^ 0xA076_1D64_78BD_642F));
        let h = mix64(h ^ i);
        mix64(h ^ j.wrapping_mul(0xE703_7ED1_A0B4_28DB))
    }

    #[inline]
    pub fn negative(&self, i: usize, j: usize) -> bool {
        self.word(i as u64, j as u64) >> 63 == 1
    }

    /// Uniform draw in `[0, 1)` at position `(i, j)`.
    #[inline]
    pub fn unit(&self, i: usize, j: usize) -> f64 {
        (self.word(i as u64, j as u64) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Independent seed for a named sub-stream.
    pub fn child(&self, label: u32) -> SketchSeed {
        SketchSeed::new(self.word(u64::MAX, label as u64), label)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.word(u64::MAX - 1, 0))
    }
}

/// Default dimension constants; each is overridable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SketchConstants {
    /// ξ = ⌈c·k/ε²⌉ for dense sign JL sketches.
    pub dense_jl: f64,
    /// ξ = ⌈c·k/ε⌉ for regression sketches.
    pub regression: f64,
    /// ξ = ⌈c·r/ε²⌉ for SRHT affine embeddings.
    pub srht_affine: f64,
    /// ξ = ⌈c·k²/ε²⌉ for sparse embeddings.
    pub sparse_embedding: f64,
}

impl Default for SketchConstants {
    fn default() -> Self {
        Self {
            dense_jl: 4.0,
            regression: 10.0,
            srht_affine: 8.0,
            sparse_embedding: 2.0,
        }
    }
}

impl SketchConstants {
    pub fn dense_jl_dim(&self, k: usize, eps: f64) -> usize {
        (self.dense_jl * k as f64 / (eps * eps)).ceil() as usize
    }

    pub fn regression_dim(&self, k: usize, eps: f64) -> usize {
        (self.regression * k as f64 / eps).ceil() as usize
    }

    pub fn affine_dim(&self, r: usize, eps: f64) -> usize {
        (self.srht_affine * r as f64 / (eps * eps)).ceil() as usize
    }

    pub fn sparse_embedding_dim(&self, k: usize, eps: f64) -> usize {
        (self.sparse_embedding * (k * k) as f64 / (eps * eps)).ceil() as usize
    }
}

/// Rows of a JL transform preserving `n_points` vectors: ⌈(4+2β)/((1/2)²−(1/2)³)·ln n⌉.
pub fn jlt_dim(n_points: usize, beta: f64) -> usize {
    let gap = 0.25 - 0.125;
    (((4.0 + 2.0 * beta) / gap) * (n_points.max(2) as f64).ln()).ceil() as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SketchKind {
    Sign,
    Srht,
    SparseEmbedding,
    Jlt,
}

/// Serializable description of a sketch; `out_dim × in_dim` when applied on the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SketchSpec {
    pub kind: SketchKind,
    pub out_dim: usize,
    pub in_dim: usize,
    pub seed: SketchSeed,
}

impl SketchSpec {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).or_else(|e| input(format!("bad sketch descriptor: {e}")))
    }

    /// Dense form, for tests and small problems.
    pub fn materialize(&self) -> Result<DenseMatrix> {
        Ok(match self.kind {
            SketchKind::Sign => SignSketch::new(self.out_dim, self.in_dim, self.seed).to_dense(),
            SketchKind::Jlt => SignSketch::new(self.out_dim, self.in_dim, self.seed).to_dense(),
            SketchKind::Srht => Srht::new(self.out_dim, self.in_dim, self.seed)?.to_dense(),
            SketchKind::SparseEmbedding => {
                SparseEmbedding::new(self.out_dim, self.in_dim, self.seed).to_dense()
            }
        })
    }
}

/// `out × in` matrix with i.i.d. entries `±scale`, default scale `1/√out`.
#[derive(Clone, Copy, Debug)]
pub struct SignSketch {
    pub out_dim: usize,
    pub in_dim: usize,
    pub seed: SketchSeed,
    pub scale: f64,
}

impl SignSketch {
    pub fn new(out_dim: usize, in_dim: usize, seed: SketchSeed) -> Self {
        Self {
            out_dim,
            in_dim,
            seed,
            scale: 1.0 / (out_dim.max(1) as f64).sqrt(),
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    /// JL transform for `n_points` vectors of dimension `in_dim`.
    pub fn jlt(n_points: usize, in_dim: usize, beta: f64, seed: SketchSeed) -> Self {
        Self::new(jlt_dim(n_points, beta), in_dim, seed)
    }

    #[inline]
    pub fn negative(&self, i: usize, j: usize) -> bool {
        self.seed.negative(i, j)
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        if self.negative(i, j) {
            -self.scale
        } else {
            self.scale
        }
    }

    pub fn spec(&self) -> SketchSpec {
        SketchSpec {
            kind: SketchKind::Sign,
            out_dim: self.out_dim,
            in_dim: self.in_dim,
            seed: self.seed,
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.out_dim, self.in_dim, |i, j| self.entry(i, j))
    }

    /// Sign pattern as `out × in`.
    pub fn table(&self) -> SignTable {
        SignTable::from_fn(self.out_dim, self.in_dim, self.scale, |i, j| self.negative(i, j))
    }

    /// Sign pattern of the transpose (`in × out`), for right multiplication.
    pub fn table_t(&self) -> SignTable {
        SignTable::from_fn(self.in_dim, self.out_dim, self.scale, |i, j| self.negative(j, i))
    }

    /// `S · A` in floating point.
    pub fn apply(&self, a: &DenseMatrix) -> DenseMatrix {
        assert_eq!(a.rows(), self.in_dim);
        &self.to_dense() * a
    }
}

/// Subsampled randomized Hadamard transform `√(pad/out) · R · H · D` where `H` is the
/// normalized Walsh–Hadamard matrix of size `pad` (the next power of two ≥ `in_dim`),
/// `D` a random sign diagonal and `R` a uniform row sample without replacement.
#[derive(Clone, Debug)]
pub struct Srht {
    pub out_dim: usize,
    pub in_dim: usize,
    pub pad: usize,
    pub seed: SketchSeed,
    d_neg: Vec<bool>,
    rows: Vec<usize>,
}

impl Srht {
    pub fn new(out_dim: usize, in_dim: usize, seed: SketchSeed) -> Result<Self> {
        let pad = in_dim.max(1).next_power_of_two();
        if out_dim > pad {
            return input(format!("SRHT output {out_dim} exceeds padded dimension {pad}"));
        }
        let d_neg = (0..pad).map(|i| seed.negative(i, usize::MAX)).collect();
        let mut rng = seed.rng();
        let rows = rand::seq::index::sample(&mut rng, pad, out_dim).into_vec();
        Ok(Self {
            out_dim,
            in_dim,
            pad,
            seed,
            d_neg,
            rows,
        })
    }

    /// Output dimension clamped to the padded input dimension.
    pub fn capped(out_dim: usize, in_dim: usize, seed: SketchSeed) -> Self {
        let pad = in_dim.max(1).next_power_of_two();
        Self::new(out_dim.min(pad), in_dim, seed).expect("clamped")
    }

    /// Magnitude of every entry.
    pub fn scale(&self) -> f64 {
        (self.pad as f64 / self.out_dim as f64).sqrt() / (self.pad as f64).sqrt()
    }

    #[inline]
    pub fn negative(&self, p: usize, i: usize) -> bool {
        self.d_neg[i] ^ ((self.rows[p] & i).count_ones() & 1 == 1)
    }

    pub fn sampled_rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn spec(&self) -> SketchSpec {
        SketchSpec {
            kind: SketchKind::Srht,
            out_dim: self.out_dim,
            in_dim: self.in_dim,
            seed: self.seed,
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let s = self.scale();
        DenseMatrix::from_fn(self.out_dim, self.in_dim, |p, i| {
            if self.negative(p, i) {
                -s
            } else {
                s
            }
        })
    }

    pub fn table(&self) -> SignTable {
        SignTable::from_fn(self.out_dim, self.in_dim, self.scale(), |p, i| self.negative(p, i))
    }

    pub fn table_t(&self) -> SignTable {
        SignTable::from_fn(self.in_dim, self.out_dim, self.scale(), |i, p| self.negative(p, i))
    }

    /// `T · A` through the fast Walsh–Hadamard transform, one column at a time.
    pub fn apply(&self, a: &DenseMatrix) -> DenseMatrix {
        assert_eq!(a.rows(), self.in_dim);
        let mut out = DenseMatrix::zeros(self.out_dim, a.cols());
        let norm = (self.pad as f64 / self.out_dim as f64).sqrt() / (self.pad as f64).sqrt();
        let mut buf = vec![0.0; self.pad];
        for c in 0..a.cols() {
            buf.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..self.in_dim {
                let x = a[(i, c)];
                buf[i] = if self.d_neg[i] { -x } else { x };
            }
            fwht(&mut buf);
            for (p, &r) in self.rows.iter().enumerate() {
                out[(p, c)] = buf[r] * norm;
            }
        }
        out
    }
}

/// In-place unnormalized Walsh–Hadamard transform in Sylvester order.
pub fn fwht(a: &mut [f64]) {
    let n = a.len();
    assert!(n.is_power_of_two() || n == 0);
    let mut h = 1;
    while h < n {
        for i in (0..n).step_by(2 * h) {
            for j in i..i + h {
                let x = a[j];
                let y = a[j + h];
                a[j] = x + y;
                a[j + h] = x - y;
            }
        }
        h *= 2;
    }
}

/// Sparse embedding `W ∈ R^{out×in}`: column `j` has a single `±1` in row `bucket[j]`.
#[derive(Clone, Debug)]
pub struct SparseEmbedding {
    pub out_dim: usize,
    pub in_dim: usize,
    pub seed: SketchSeed,
    bucket: Vec<usize>,
    neg: Vec<bool>,
}

impl SparseEmbedding {
    pub fn new(out_dim: usize, in_dim: usize, seed: SketchSeed) -> Self {
        let out = out_dim.max(1) as u64;
        let bucket = (0..in_dim).map(|j| (seed.word(j as u64, 1) % out) as usize).collect();
        let neg = (0..in_dim).map(|j| seed.negative(j, 2)).collect();
        Self {
            out_dim,
            in_dim,
            seed,
            bucket,
            neg,
        }
    }

    pub fn bucket(&self, j: usize) -> usize {
        self.bucket[j]
    }

    pub fn negative(&self, j: usize) -> bool {
        self.neg[j]
    }

    pub fn spec(&self) -> SketchSpec {
        SketchSpec {
            kind: SketchKind::SparseEmbedding,
            out_dim: self.out_dim,
            in_dim: self.in_dim,
            seed: self.seed,
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut w = DenseMatrix::zeros(self.out_dim, self.in_dim);
        for j in 0..self.in_dim {
            w[(self.bucket[j], j)] = if self.neg[j] { -1.0 } else { 1.0 };
        }
        w
    }

    /// `W · A` for dense `A` with `in_dim` rows.
    pub fn apply_rows(&self, a: &DenseMatrix) -> DenseMatrix {
        assert_eq!(a.rows(), self.in_dim);
        let mut out = DenseMatrix::zeros(self.out_dim, a.cols());
        for i in 0..self.in_dim {
            let (b, s) = (self.bucket[i], if self.neg[i] { -1.0 } else { 1.0 });
            for c in 0..a.cols() {
                out[(b, c)] += s * a[(i, c)];
            }
        }
        out
    }

    /// `A · Wᵀ` for sparse `A` with `in_dim` columns; touches each nonzero once.
    pub fn apply_cols_sparse(&self, a: &SparseColMatrix) -> DenseMatrix {
        assert_eq!(a.cols(), self.in_dim);
        let mut out = DenseMatrix::zeros(a.rows(), self.out_dim);
        for j in 0..a.cols() {
            let (b, s) = (self.bucket[j], if self.neg[j] { -1.0 } else { 1.0 });
            let (r, v) = a.column(j);
            for (&i, &x) in r.iter().zip(v) {
                out[(i, b)] += s * x;
            }
        }
        out
    }

    /// `A · Wᵀ` for dense `A` with `in_dim` columns.
    pub fn apply_cols(&self, a: &DenseMatrix) -> DenseMatrix {
        assert_eq!(a.cols(), self.in_dim);
        let mut out = DenseMatrix::zeros(a.rows(), self.out_dim);
        for j in 0..a.cols() {
            let (b, s) = (self.bucket[j], if self.neg[j] { -1.0 } else { 1.0 });
            for i in 0..a.rows() {
                out[(i, b)] += s * a[(i, j)];
            }
        }
        out
    }

    /// Buckets that receive at least one input coordinate, in increasing order.
    pub fn occupied(&self) -> Vec<usize> {
        let mut seen = vec![false; self.out_dim];
        for &b in &self.bucket {
            seen[b] = true;
        }
        (0..self.out_dim).filter(|&b| seen[b]).collect()
    }
}
