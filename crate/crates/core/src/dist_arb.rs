//! Principal subspace protocol for arbitrarily partitioned matrices `A = Σ A_i`.
//!
//! A seeded rank test routes the input either to an exact low-rank branch (span of
//! `A H''` plus an affine sketch solve) or to a smoothed branch (tiny random noise on
//! machine 1, two-sided sketch, rounded right factors).

use crate::batch::{basis_of, check_k, lift, two_sided_sketches};
use crate::error::{input, Error, Result};
use crate::exact::{exact_left_mul, exact_mul, ExactMatrix};
use crate::harness::{digest_dense, gather_sum_exact, CommLedger, Cluster};
use crate::matrix::{numeric_rank, rank_constrained_affine_solve, round_to_grid, svd, truncated_svd, DenseMatrix};
use crate::sketch::{SignSketch, SketchConstants, SketchSeed, Srht};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArbParams {
    pub k: usize,
    pub eps: f64,
    pub xi1: Option<usize>,
    pub xi2: Option<usize>,
    /// Requested SRHT size for the low-rank branch, default ⌈8k/ε²⌉.
    pub affine_xi: Option<usize>,
    /// Noise magnitude; `None` picks 1e-6·‖A‖_F/√(mn), zero disables noise.
    pub eta: Option<f64>,
    /// Rounding grid for the right factors; `None` picks 1e-6, zero disables rounding.
    pub rho: Option<f64>,
    /// Rank-test failure budget; sets the oversampling of the rank-test sketches.
    pub delta: f64,
    pub rank_tol: Option<f64>,
    pub seed: u64,
    pub constants: SketchConstants,
}

impl ArbParams {
    pub fn new(k: usize, eps: f64, seed: u64) -> Self {
        Self {
            k,
            eps,
            xi1: None,
            xi2: None,
            affine_xi: None,
            eta: None,
            rho: None,
            delta: 0.01,
            rank_tol: None,
            seed,
            constants: SketchConstants::default(),
        }
    }

    pub fn dims(&self, m: usize, n: usize) -> ArbDims {
        let d = self.constants.dense_jl_dim(self.k, self.eps);
        let a = self
            .affine_xi
            .unwrap_or_else(|| self.constants.affine_dim(self.k, self.eps));
        ArbDims {
            xi1: self.xi1.unwrap_or(d),
            xi2: self.xi2.unwrap_or(d),
            xi_left: a.min(m.max(1).next_power_of_two()),
            xi_right: a.min(n.max(1).next_power_of_two()),
            c: rank_test_width(self.k, self.delta),
        }
    }

    pub fn default_eta(a_frob: f64, m: usize, n: usize) -> f64 {
        1e-6 * a_frob / ((m * n) as f64).sqrt()
    }
}

/// Width of the rank-test sketches: `2k + 1` plus `⌈log₂(1/δ)⌉` extra rows, since
/// ±1 matrices of width exactly `2k + 1` lose rank on structured inputs too often.
pub fn rank_test_width(k: usize, delta: f64) -> usize {
    let extra = if delta > 0.0 && delta < 1.0 { (1.0 / delta).log2().ceil() as usize } else { 0 };
    2 * k + 1 + extra
}

/// Sketch sizes actually used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArbDims {
    pub xi1: usize,
    pub xi2: usize,
    pub xi_left: usize,
    pub xi_right: usize,
    /// Width of the rank-test sketches, see [`rank_test_width`].
    pub c: usize,
}

/// Every random object of one protocol run, derived from the agreed seed.
#[derive(Clone, Debug)]
pub struct ArbSketches {
    pub s: SignSketch,
    pub t: SignSketch,
    pub h_left: SignSketch,
    pub h_right: SignSketch,
    pub t_left: Srht,
    pub t_right: Srht,
    pub noise: SketchSeed,
}

impl ArbSketches {
    pub fn derive(seed: u64, m: usize, n: usize, d: &ArbDims) -> Self {
        let (s, t) = two_sided_sketches(seed, m, n, d.xi1, d.xi2);
        let root = SketchSeed::new(seed, 0);
        Self {
            s,
            t,
            h_left: SignSketch::new(d.c, m, root.child(3)),
            h_right: SignSketch::new(d.c, n, root.child(4)),
            t_left: Srht::capped(d.xi_left, m, root.child(5)),
            t_right: Srht::capped(d.xi_right, n, root.child(6)),
            noise: root.child(7),
        }
    }
}

/// Dense `±eta` perturbation, a pure function of `(seed, i, j)`.
pub fn noise_matrix(m: usize, n: usize, eta: f64, seed: SketchSeed) -> DenseMatrix {
    DenseMatrix::from_fn(m, n, |i, j| if seed.negative(i, j) { -eta } else { eta })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    LowRank,
    Smoothed,
}

#[derive(Clone, Debug)]
pub struct RankTest {
    /// Numerical rank of `H' A H''`.
    pub rank: usize,
    /// True when the sketch rank exceeds `2k`.
    pub above: bool,
    /// Per-machine exact `A_i H''`, reused by the low-rank branch.
    pub c_parts: Vec<ExactMatrix>,
}

/// Machines upload `H' A_i H''`; the server sums and measures the rank.
pub fn rank_test(
    cluster: &Cluster,
    ledger: &mut CommLedger,
    sk: &ArbSketches,
    k: usize,
    tol: Option<f64>,
) -> Result<RankTest> {
    let parts = cluster.arbitrary_parts()?;
    let hr = sk.h_right.table_t();
    let hl = sk.h_left.table();
    let local: Vec<(ExactMatrix, ExactMatrix)> = cluster.map_machines(|i| {
        let ah = hr.right_apply(&parts[i]);
        let r = hl.left_apply_exact(&ah);
        (ah, r)
    });
    let (c_parts, r_parts): (Vec<_>, Vec<_>) = local.into_iter().unzip();
    let sum = gather_sum_exact(ledger, "rank-test", &r_parts)?;
    let r = sum.round_scaled(hl.scale * hr.scale);
    let rank = numeric_rank(&r, tol);
    Ok(RankTest {
        rank,
        above: rank > 2 * k,
        c_parts,
    })
}

/// Outcome of the low-rank branch; `None` from [`low_rank_protocol`] means the span
/// certificate failed.
#[derive(Clone, Debug)]
pub struct LowRankResult {
    pub u: DenseMatrix,
    pub machines_agree: bool,
}

pub fn low_rank_protocol(
    cluster: &Cluster,
    ledger: &mut CommLedger,
    sk: &ArbSketches,
    rt: &RankTest,
    k: usize,
    tol: Option<f64>,
) -> Result<Option<LowRankResult>> {
    let parts = cluster.arbitrary_parts()?;
    let hr = sk.h_right.table_t();
    let c = gather_sum_exact(ledger, "c-up", &rt.c_parts)?.round_scaled(hr.scale);
    if numeric_rank(&c, tol) != rt.rank {
        return Ok(None);
    }
    ledger.broadcast("c-down", (c.rows() * c.cols()) as u64, digest_dense(&c))?;

    let tl = sk.t_left.table();
    let tr = sk.t_right.table_t();
    let ct = c.t();
    let local: Vec<(ExactMatrix, ExactMatrix)> = cluster.map_machines(|i| {
        let atr = tr.right_apply(&parts[i]);
        (tl.left_apply_exact(&atr), exact_left_mul(&ct, &atr))
    });
    let (m_parts, l_parts): (Vec<_>, Vec<_>) = local.into_iter().unzip();
    let m_sum = gather_sum_exact(ledger, "affine-up", &m_parts)?.round_scaled(tl.scale * tr.scale);
    let l_sum = gather_sum_exact(ledger, "affine-up", &l_parts)?.round_scaled(tr.scale);
    let words = (m_sum.rows() * m_sum.cols() + l_sum.rows() * l_sum.cols()) as u64;
    ledger.broadcast("affine-down", words, digest_dense(&m_sum) ^ digest_dense(&l_sum))?;

    let solve = |_: usize| -> Result<DenseMatrix> {
        let nm = tl.left_apply(&c).round_scaled(tl.scale);
        let x = rank_constrained_affine_solve(&m_sum, &nm, &l_sum, k)?;
        let f = svd(&(&c * &x));
        Ok(f.u.leading_cols(k.min(f.u.cols())))
    };
    let us: Vec<Result<DenseMatrix>> = cluster.map_machines(solve);
    let us: Vec<DenseMatrix> = us.into_iter().collect::<Result<_>>()?;
    let machines_agree = us.windows(2).all(|w| w[0].bit_eq(&w[1]));
    Ok(Some(LowRankResult {
        u: us.into_iter().next().expect("at least one machine"),
        machines_agree,
    }))
}

#[derive(Clone, Debug)]
pub struct SmoothedResult {
    pub u: DenseMatrix,
    pub v_hat: DenseMatrix,
    pub rank_deficient: bool,
}

pub fn smoothed_protocol(
    cluster: &Cluster,
    ledger: &mut CommLedger,
    sk: &ArbSketches,
    k: usize,
    eta: f64,
    rho: f64,
) -> Result<SmoothedResult> {
    let parts = cluster.arbitrary_parts()?;
    let (m, n) = (cluster.m, cluster.n);
    let s_tab = sk.s.table();
    let t_tab = sk.t.table_t();
    let noise = (eta > 0.0).then(|| noise_matrix(m, n, eta, sk.noise));

    let b_parts: Vec<ExactMatrix> = cluster.map_machines(|i| {
        let mut at = t_tab.right_apply(&parts[i]);
        if let (0, Some(nz)) = (i, &noise) {
            at.merge(&t_tab.right_apply(nz));
        }
        s_tab.left_apply_exact(&at)
    });
    let b = gather_sum_exact(ledger, "sketch-up", &b_parts)?.round_scaled(s_tab.scale * t_tab.scale);
    let (f, _) = truncated_svd(&b, k)?;
    let v_hat = if rho > 0.0 { round_to_grid(&f.v, rho) } else { f.v };
    ledger.broadcast("v-down", (v_hat.rows() * k) as u64, digest_dense(&v_hat))?;

    let w = lift(&t_tab, &v_hat);
    let x_parts: Vec<ExactMatrix> = cluster.map_machines(|i| {
        let mut x = exact_mul(&parts[i], &w);
        if let (0, Some(nz)) = (i, &noise) {
            x.merge(&exact_mul(nz, &w));
        }
        x
    });
    let x = gather_sum_exact(ledger, "x-up", &x_parts)?.round();
    let (u, rank_deficient) = basis_of(&x, k)?;
    ledger.broadcast("u-down", (m * k) as u64, digest_dense(&u))?;
    Ok(SmoothedResult {
        u,
        v_hat,
        rank_deficient,
    })
}

#[derive(Clone, Debug)]
pub struct ArbOutcome {
    pub u: DenseMatrix,
    pub branch: Branch,
    pub ledger: CommLedger,
    /// Seed agreed in the final attempt; all sketches derive from it.
    pub sketch_seed: u64,
    pub rank_estimate: usize,
    pub rank_deficient: bool,
    pub reseeded: bool,
    pub machines_agree: bool,
    pub eta: f64,
    pub rho: f64,
    pub dims: ArbDims,
}

pub fn distributed_pca_arbitrary(cluster: &Cluster, p: &ArbParams) -> Result<ArbOutcome> {
    let (m, n) = (cluster.m, cluster.n);
    check_k(p.k, p.eps, m, n)?;
    let dims = p.dims(m, n);
    if p.k > dims.xi1.min(dims.xi2) {
        return input(format!("k = {} exceeds sketch sizes", p.k));
    }
    let eta = match p.eta {
        Some(e) => e,
        None => ArbParams::default_eta(cluster.global_dense().frob(), m, n),
    };
    let rho = p.rho.unwrap_or(1e-6);
    if eta < 0.0 || rho < 0.0 {
        return input("eta and rho must be nonnegative");
    }
    let mut ledger = CommLedger::new(cluster.machines(), p.seed);
    let mut reseeded = false;
    loop {
        let seed = ledger.agree_seed("seed")?;
        let sk = ArbSketches::derive(seed, m, n, &dims);
        let rt = rank_test(cluster, &mut ledger, &sk, p.k, p.rank_tol)?;
        if rt.above {
            let r = smoothed_protocol(cluster, &mut ledger, &sk, p.k, eta, rho)?;
            return Ok(ArbOutcome {
                u: r.u,
                branch: Branch::Smoothed,
                ledger,
                sketch_seed: seed,
                rank_estimate: rt.rank,
                rank_deficient: r.rank_deficient,
                reseeded,
                machines_agree: true,
                eta,
                rho,
                dims,
            });
        }
        match low_rank_protocol(cluster, &mut ledger, &sk, &rt, p.k, p.rank_tol)? {
            Some(r) => {
                return Ok(ArbOutcome {
                    u: r.u,
                    branch: Branch::LowRank,
                    ledger,
                    sketch_seed: seed,
                    rank_estimate: rt.rank,
                    rank_deficient: rt.rank < p.k,
                    reseeded,
                    machines_agree: r.machines_agree,
                    eta,
                    rho,
                    dims,
                })
            }
            None if !reseeded => reseeded = true,
            None => {
                return Err(Error::RetryWithNewSeed(
                    "rank of A·H'' disagrees with the rank test twice".into(),
                ))
            }
        }
    }
}

/// Ledger total of the smoothed branch.
pub fn smoothed_words(s: usize, m: usize, k: usize, d: &ArbDims) -> u64 {
    (s * (2 + d.c * d.c + d.xi1 * d.xi2 + d.xi2 * k + 2 * m * k)) as u64
}

/// Ledger total of the low-rank branch when the span certificate passes first time.
pub fn low_rank_words(s: usize, m: usize, d: &ArbDims) -> u64 {
    (s * (2 + d.c * d.c + 2 * m * d.c + 2 * (d.xi_left * d.xi_right + d.c * d.xi_right))) as u64
}

/// Artifact constants `(C1, C2, C3)` of the bound `C1·s·k·m + C2·s·(k/ε²)² + C3·s·k²`
/// under the default sketch constants and the default δ = 0.01 (rank-test width ≤ 10k).
pub const COMM_CONSTANTS: (f64, f64, f64) = (20.0, 342.0, 102.0);

pub fn comm_bound(s: usize, m: usize, k: usize, eps: f64) -> f64 {
    let (c1, c2, c3) = COMM_CONSTANTS;
    let (s, m, k) = (s as f64, m as f64, k as f64);
    let q = k / (eps * eps);
    c1 * s * k * m + c2 * s * q * q + c3 * s * k * k
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms_sit_under_the_bound() {
        for k in 1..=8 {
            for eps in [1.0, 0.75, 0.5, 0.3, 0.1] {
                for m in [1, 5, 40, 300] {
                    for n in [1, 7, 64, 1000] {
                        let d = ArbParams::new(k, eps, 0).dims(m, n);
                        let b = comm_bound(3, m, k, eps);
                        assert!(smoothed_words(3, m, k, &d) as f64 <= b, "{k} {eps} {m} {n}");
                        assert!(low_rank_words(3, m, &d) as f64 <= b, "{k} {eps} {m} {n}");
                    }
                }
            }
        }
    }

    #[test]
    fn rank_test_width_follows_delta() {
        assert_eq!(rank_test_width(2, 0.01), 12);
        assert_eq!(rank_test_width(2, 0.5), 6);
        assert_eq!(rank_test_width(2, 1.0), 5);
    }
}
