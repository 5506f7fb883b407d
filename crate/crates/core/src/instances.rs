//! Seeded instance generators: noisy low-rank matrices and the two hard families.

use crate::error::{input, Error, Result};
use crate::harness::Cluster;
use crate::matrix::{colspan_residual_sq, qr, tail_sq, DenseMatrix, SparseColMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian(m: usize, n: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let v: Vec<f64> = (0..m * n).map(|_| rng.sample(StandardNormal)).collect();
    DenseMatrix::from_row_major(m, n, v).expect("finite")
}

/// `X Yᵀ + noise · G` with standard normal `X` (m×k), `Y` (n×k) and `G`.
pub fn gen_lowrank_noise(m: usize, n: usize, k: usize, noise: f64, seed: u64) -> Result<DenseMatrix> {
    if k > m.min(n) {
        return input(format!("k = {k} exceeds min({m}, {n})"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gaussian(m, k, &mut rng);
    let y = gaussian(n, k, &mut rng);
    let mut a = &x * &y.t();
    if noise != 0.0 {
        let g = gaussian(m, n, &mut rng);
        a = &a + &g.scale(noise);
    }
    Ok(a)
}

/// Integer matrix of rank at most `r`: product of integer factors with entries in `-b..=b`.
pub fn gen_integer_rank(m: usize, n: usize, r: usize, b: i64, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DenseMatrix::from_fn(m, r, |_, _| rng.gen_range(-b..=b) as f64);
    let y = DenseMatrix::from_fn(r, n, |_, _| rng.gen_range(-b..=b) as f64);
    &x * &y
}

/// Sparse matrix with at most `phi` nonzeros per column whose values follow a
/// rank-`k` model plus noise on the chosen support.
pub fn gen_sparse_lowrank(m: usize, n: usize, k: usize, phi: usize, noise: f64, seed: u64) -> Result<SparseColMatrix> {
    if phi == 0 || phi > m {
        return input(format!("phi = {phi} must lie in 1..={m}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gaussian(m, k, &mut rng);
    let mut trip = Vec::new();
    for j in 0..n {
        let y: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let rows = rand::seq::index::sample(&mut rng, m, phi).into_vec();
        for i in rows {
            let mut v: f64 = (0..k).map(|t| x[(i, t)] * y[t]).sum();
            v += noise * rng.sample::<f64, _>(StandardNormal);
            if v != 0.0 {
                trip.push((i, j, v));
            }
        }
    }
    SparseColMatrix::from_triplets(m, n, &trip)
}

#[derive(Clone, Copy, Debug)]
pub struct DenseHardSpec {
    pub s: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

#[derive(Clone, Debug)]
pub struct DenseHard {
    pub cluster: Cluster,
    /// The rounded orthonormal block held by machine 1.
    pub r_tilde: DenseMatrix,
    /// Rounding denominator `(s·k·m)³`.
    pub b: f64,
}

/// Column-partitioned instance `(R̃ | I/B | … | I/B | 0)`: machine 1 holds a rounded
/// Haar-random orthonormal `m × k` block, machines `2..s−1` hold `I_m / B` and machine
/// `s` holds the remaining zero columns.
pub fn gen_dense_hard(spec: DenseHardSpec, seed: u64) -> Result<DenseHard> {
    let DenseHardSpec { s, m, k, n } = spec;
    if s < 2 || k == 0 || k > m {
        return input("need s >= 2 and 1 <= k <= m");
    }
    if n < s * m {
        return input(format!("need n >= s·m = {}", s * m));
    }
    let b = ((s * k * m) as f64).powi(3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (q, _) = qr(&gaussian(m, k, &mut rng))?;
    let r_tilde = DenseMatrix::from_fn(m, k, |i, j| (q[(i, j)] * b).round() / b);
    let mut blocks = vec![SparseColMatrix::from_dense(&r_tilde)];
    let scaled_eye = DenseMatrix::identity(m).scale(1.0 / b);
    for _ in 2..s {
        blocks.push(SparseColMatrix::from_dense(&scaled_eye));
    }
    let t = n - (s - 2) * m - k;
    blocks.push(SparseColMatrix::from_dense(&DenseMatrix::zeros(m, t)));
    let cluster = Cluster::columns(blocks)?;
    let tail = tail_sq(&cluster.global_dense(), k);
    let bound = (s * m) as f64 / (b * b);
    if tail >= bound {
        return Err(Error::Internal(format!(
            "hard instance tail {tail:e} not below s·m/B² = {bound:e}"
        )));
    }
    Ok(DenseHard { cluster, r_tilde, b })
}

/// Block-diagonal `((φ+1)k) × (φk)` matrix; column `i` of each block is `e_1 + e_{i+1}`.
pub fn gen_css_hard(k: usize, phi: usize) -> SparseColMatrix {
    let mut trip = Vec::with_capacity(2 * k * phi);
    for b in 0..k {
        let (r0, c0) = (b * (phi + 1), b * phi);
        for i in 0..phi {
            trip.push((r0, c0 + i, 1.0));
            trip.push((r0 + i + 1, c0 + i, 1.0));
        }
    }
    SparseColMatrix::from_triplets((phi + 1) * k, phi * k, &trip).expect("valid construction")
}

/// `L̃ A` with `L̃` a Haar orthonormal matrix rounded to multiples of `grid`.
pub fn rotate(a: &SparseColMatrix, grid: f64, seed: u64) -> Result<DenseMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = a.rows();
    let (l, _) = qr(&gaussian(n, n, &mut rng))?;
    let lt = DenseMatrix::from_fn(n, n, |i, j| (l[(i, j)] / grid).round() * grid);
    Ok(a.left_mul_dense(&lt))
}

#[derive(Clone, Debug)]
pub struct BruteForce {
    pub subsets: usize,
    pub tail: f64,
    /// Smallest `‖A − P A‖_F² / ‖A − A_k‖_F²` over all subsets.
    pub min_ratio: f64,
    pub best_subset: Vec<usize>,
}

/// Enumerates every `size`-column subset and records the best projection error.
pub fn css_brute_force(a: &DenseMatrix, k: usize, size: usize) -> BruteForce {
    let n = a.cols();
    let tail = tail_sq(a, k);
    let mut idx: Vec<usize> = (0..size).collect();
    let mut best = f64::INFINITY;
    let mut best_subset = idx.clone();
    let mut count = 0;
    if size <= n {
        loop {
            count += 1;
            let e = colspan_residual_sq(a, &a.select_cols(&idx));
            if e < best {
                best = e;
                best_subset = idx.clone();
            }
            let mut i = size;
            while i > 0 && idx[i - 1] == n - size + i - 1 {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            idx[i - 1] += 1;
            for j in i..size {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }
    BruteForce {
        subsets: count,
        tail,
        min_ratio: best / tail,
        best_subset,
    }
}
