//! Column-partition protocol for sparse matrices: local dual-set sampling, global
//! selection, distributed adaptive sampling and a rank-`k` basis inside the span of
//! the selected columns.

use crate::css::{deterministic_css, pad_selection, right_split, residual_beta, sample_by_weights, top_left};
use crate::css::{bss_sampling, residual_col_norms, subspace_sketch_dim};
use crate::css_fast::{compact_subspace_sketch, css_sparse_counted, jlt_residual_norms, subspace_embedding_dim, FastParams, Instrument};
use crate::error::{input, Error, Result};
use crate::harness::{digest_dense, digest_sparse, sparse_columns_cost, Cluster, CommLedger};
use crate::matrix::{colspan_residual_sq, orthonormal_basis, proj_residual_sq, tail_sq, DenseMatrix, SparseColMatrix};
use crate::sketch::{SignSketch, SketchSeed, SparseEmbedding};
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Kernel {
    /// Exact SVDs and dense sign sketches.
    Exact,
    /// Sparse kernels with failure budget `delta`.
    Fast { delta: f64 },
}

#[derive(Clone, Debug, Serialize)]
pub struct CssParams {
    pub k: usize,
    pub eps: f64,
    pub ell: usize,
    pub c1: usize,
    pub c2: usize,
    pub seed: u64,
    pub kernel: Kernel,
    /// Broadcast `Ξ` and let every machine compute `Δ` and `U` itself.
    pub per_machine_delta: bool,
    /// Evaluate residual chains on the implied matrix after the run.
    pub check: bool,
}

impl CssParams {
    pub fn new(k: usize, eps: f64, seed: u64) -> Self {
        Self {
            k,
            eps,
            ell: 4 * k,
            c1: 4 * k,
            c2: (50.0 * k as f64 / eps).ceil() as usize,
            seed,
            kernel: Kernel::Exact,
            per_machine_delta: false,
            check: true,
        }
    }

    pub fn fast(k: usize, eps: f64, delta: f64, seed: u64) -> Self {
        Self {
            kernel: Kernel::Fast { delta },
            ..Self::new(k, eps, seed)
        }
    }

    pub fn c(&self) -> usize {
        self.c1 + self.c2
    }

    /// Width of the subspace sketch.
    pub fn xi(&self) -> usize {
        match self.kernel {
            Kernel::Exact => subspace_sketch_dim(self.c(), self.eps),
            Kernel::Fast { .. } => subspace_embedding_dim(self.c(), self.eps),
        }
    }
}

/// Residuals measured on the implied matrix after a run.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CssChecks {
    pub tail: f64,
    /// `‖A − C C⁺ A‖²` for the global selection.
    pub residual_c: f64,
    /// `‖A − C̃ C̃⁺ A‖²`.
    pub residual_c_tilde: f64,
    /// `‖A − U Uᵀ A‖²`.
    pub residual_u: f64,
}

#[derive(Clone, Debug)]
pub struct CssOutcome {
    /// Global indices of `C̃`, `c1` global picks followed by `c2` adaptive draws.
    pub columns: Vec<usize>,
    pub c_tilde: SparseColMatrix,
    pub u: DenseMatrix,
    pub ledger: CommLedger,
    /// Machines whose block had at most `ℓ` columns and sent everything.
    pub sent_all: Vec<bool>,
    /// Set when every machine reported a zero residual after the global stage.
    pub adaptive_skipped: bool,
    /// Draws assigned to each machine.
    pub t: Vec<usize>,
    pub betas: Vec<f64>,
    pub machines_agree: bool,
    pub checks: Option<CssChecks>,
    pub instrument: Instrument,
}

fn block_dense(b: &SparseColMatrix) -> DenseMatrix {
    b.to_dense()
}

/// Stage 1 on one machine: `ℓ` distinct local column indices.
pub fn local_sample(block: &SparseColMatrix, k: usize, ell: usize) -> Result<(Vec<usize>, bool)> {
    let w = block.cols();
    if w <= ell {
        return Ok(((0..w).collect(), true));
    }
    let a = block_dense(block);
    let kk = k.min(a.rows()).min(w);
    if kk == 0 {
        return Ok(((0..ell).collect(), false));
    }
    let (v, e) = right_split(&a, kk);
    let s = bss_sampling(&v, &e, ell)?;
    let mut idx = s.indices;
    pad_selection(&mut idx, &e, ell);
    Ok((idx, false))
}

/// Stage 2 at the server: `c1` column indices of `G`.
pub fn global_sample(g: &SparseColMatrix, k: usize, c1: usize) -> Result<Vec<usize>> {
    if c1 >= g.cols() {
        return Ok((0..g.cols()).collect());
    }
    let gd = g.to_dense();
    let kk = k.min(gd.rows()).min(gd.cols());
    Ok(deterministic_css(&gd, kk, c1)?.indices)
}

fn union_buckets(w: &SparseEmbedding, offset: usize, width: usize) -> Vec<usize> {
    let mut b: Vec<usize> = (offset..offset + width).map(|j| w.bucket(j)).collect();
    b.sort_unstable();
    b.dedup();
    b
}

/// Runs the four-stage protocol on a column-partitioned cluster.
pub fn distributed_css_pca(cluster: &Cluster, p: &CssParams) -> Result<CssOutcome> {
    let blocks = cluster.column_blocks()?;
    let (m, n, s) = (cluster.m, cluster.n, cluster.machines());
    if p.k == 0 || p.k > m.min(n) {
        return input(format!("k = {} must lie in 1..={}", p.k, m.min(n)));
    }
    if !(p.eps > 0.0 && p.eps < 1.0) {
        return input(format!("eps = {} must lie in (0, 1)", p.eps));
    }
    if p.ell <= p.k || p.c1 <= p.k {
        return input("ell and c1 must exceed k");
    }
    let fast = match p.kernel {
        Kernel::Fast { delta } => Some(FastParams::new(p.k, p.eps, delta)?),
        Kernel::Exact => None,
    };
    let mut ledger = CommLedger::new(s, p.seed);
    let root = SketchSeed::new(ledger.agree_seed("seed")?, 0);
    let mut instrument = Instrument::default();

    // Stage 1: local selection.
    let local: Vec<Result<(Vec<usize>, bool, Instrument)>> = cluster.map_machines(|i| {
        let b = &blocks[i].data;
        match fast {
            None => local_sample(b, p.k, p.ell).map(|(idx, all)| (idx, all, Instrument::default())),
            Some(_) => {
                if b.cols() <= p.ell {
                    return Ok(((0..b.cols()).collect(), true, Instrument::default()));
                }
                let mut ins = Instrument::default();
                let kk = p.k.min(b.rows()).min(b.cols());
                let idx = css_sparse_counted(b, kk, p.ell, root.child(20).child(i as u32), crate::par::ExecMode::Sequential, &mut ins)?;
                Ok((idx, false, ins))
            }
        }
    });
    let mut picks = Vec::with_capacity(s);
    let mut sent_all = Vec::with_capacity(s);
    for r in local {
        let (idx, all, ins) = r?;
        instrument.merge(&ins);
        picks.push(idx);
        sent_all.push(all);
    }
    let local_cols: Vec<SparseColMatrix> = picks
        .iter()
        .zip(blocks)
        .map(|(idx, b)| b.data.select_cols(idx))
        .collect();
    ledger.upload(
        "local",
        &local_cols.iter().map(sparse_columns_cost).collect::<Vec<_>>(),
        &local_cols.iter().map(digest_sparse).collect::<Vec<_>>(),
    )?;

    // Stage 2: global selection over G = [C_1 … C_s].
    let g_global: Vec<usize> = picks
        .iter()
        .zip(blocks)
        .flat_map(|(idx, b)| idx.iter().map(move |&j| b.offset + j))
        .collect();
    let refs: Vec<&SparseColMatrix> = local_cols.iter().collect();
    let g = SparseColMatrix::hcat(&refs)?;
    let chosen = match fast {
        None => global_sample(&g, p.k, p.c1)?,
        Some(_) => {
            if p.c1 >= g.cols() {
                (0..g.cols()).collect()
            } else {
                let kk = p.k.min(g.rows()).min(g.cols());
                css_sparse_counted(&g, kk, p.c1, root.child(21), cluster.exec, &mut instrument)?
            }
        }
    };
    let mut columns: Vec<usize> = chosen.iter().map(|&t| g_global[t]).collect();
    let c_mat = g.select_cols(&chosen);
    ledger.broadcast("global-down", sparse_columns_cost(&c_mat), digest_sparse(&c_mat))?;

    // Stage 3: residual estimates, machine draws, local adaptive sampling.
    let y_c = orthonormal_basis(&c_mat.to_dense(), None);
    let jlt = fast.map(|_| SignSketch::jlt(n, m, 1.0, root.child(30)));
    let norms: Vec<(Vec<f64>, Instrument)> = cluster.map_machines(|i| {
        let b = &blocks[i].data;
        match &jlt {
            None => (residual_col_norms(&block_dense(b), &c_mat.to_dense()), Instrument::default()),
            Some(g) => {
                let mut ins = Instrument::default();
                (jlt_residual_norms(b, &y_c, g, &mut ins), ins)
            }
        }
    });
    let mut col_norms = Vec::with_capacity(s);
    for (v, ins) in norms {
        instrument.merge(&ins);
        col_norms.push(v);
    }
    let betas: Vec<f64> = col_norms.iter().map(|v| residual_beta(v.iter().sum())).collect();
    ledger.upload("beta-up", &vec![1; s], &betas.iter().map(|b| b.to_bits()).collect::<Vec<_>>())?;
    let adaptive_skipped = betas.iter().all(|&b| b == 0.0);
    let mut t = vec![0usize; s];
    let mut c_hat_parts: Vec<SparseColMatrix> = Vec::new();
    if !adaptive_skipped {
        for i in sample_by_weights(&betas, p.c2, root.child(31)) {
            t[i] += 1;
        }
        ledger.scatter(
            "t-down",
            &vec![1; s],
            &t.iter().map(|&x| x as u64).collect::<Vec<_>>(),
        )?;
        let draws: Vec<Vec<usize>> = cluster.map_machines(|i| {
            sample_by_weights(&col_norms[i], t[i], root.child(32).child(i as u32))
        });
        let mut words = Vec::with_capacity(s);
        let mut digests = Vec::with_capacity(s);
        for (i, d) in draws.iter().enumerate() {
            let cols = blocks[i].data.select_cols(d);
            words.push(sparse_columns_cost(&cols));
            digests.push(digest_sparse(&cols));
            columns.extend(d.iter().map(|&j| blocks[i].offset + j));
            c_hat_parts.push(cols);
        }
        ledger.upload("adaptive", &words, &digests)?;
    }
    let c_hat = if c_hat_parts.is_empty() {
        SparseColMatrix::from_triplets(m, 0, &[])?
    } else {
        SparseColMatrix::hcat(&c_hat_parts.iter().collect::<Vec<_>>())?
    };
    let c_tilde = SparseColMatrix::hcat(&[&c_mat, &c_hat])?;

    // Stage 4: restricted SVD inside span(C̃).
    ledger.broadcast("subspace-bcast", sparse_columns_cost(&c_hat), digest_sparse(&c_hat))?;
    let ct_dense = c_tilde.to_dense();
    let ys: Vec<DenseMatrix> = cluster.map_machines(|_| orthonormal_basis(&ct_dense, None));
    let y = ys[0].clone();
    if ys.iter().any(|yi| !yi.bit_eq(&y)) {
        return Err(Error::Protocol("machines disagree on the basis of C̃".into()));
    }
    if p.k > y.cols() {
        return Err(Error::Protocol(format!(
            "selected columns span rank {} < k = {}",
            y.cols(),
            p.k
        )));
    }
    let xi = p.xi();
    let sketch_seed = root.child(40);
    let parts: Vec<(DenseMatrix, Instrument)> = match fast {
        None => {
            let w = SignSketch::new(xi, n, sketch_seed);
            cluster.map_machines(|i| {
                let b = &blocks[i];
                let aw = crate::css::sparse_sign_product(&b.data, &w, b.offset);
                (&y.t() * &aw, Instrument::default())
            })
        }
        Some(_) => {
            let w = SparseEmbedding::new(xi, n, sketch_seed);
            let all = w.occupied();
            cluster.map_machines(|i| {
                let b = &blocks[i];
                let mut ins = Instrument::default();
                let mine = union_buckets(&w, b.offset, b.data.cols());
                let h = compact_subspace_sketch(&b.data, &y, &w, b.offset, &mine, &mut ins);
                let mut full = DenseMatrix::zeros(y.cols(), all.len());
                for (c, bk) in mine.iter().enumerate() {
                    let pos = all.binary_search(bk).expect("occupied bucket");
                    for q in 0..y.cols() {
                        full[(q, pos)] = h[(q, c)];
                    }
                }
                (full, ins)
            })
        }
    };
    let mut words = Vec::with_capacity(s);
    let mut digests = Vec::with_capacity(s);
    let mut xi_m: Option<DenseMatrix> = None;
    for (i, (h, ins)) in parts.into_iter().enumerate() {
        instrument.merge(&ins);
        let cols = match fast {
            None => h.cols(),
            Some(_) => {
                let w = SparseEmbedding::new(xi, n, sketch_seed);
                union_buckets(&w, blocks[i].offset, blocks[i].data.cols()).len()
            }
        };
        words.push((h.rows() * cols) as u64);
        digests.push(digest_dense(&h));
        xi_m = Some(match xi_m {
            None => h,
            Some(acc) => &acc + &h,
        });
    }
    ledger.upload("sketch-up", &words, &digests)?;
    let xi_m = xi_m.expect("at least one machine");

    let (u, machines_agree) = if p.per_machine_delta {
        ledger.broadcast("xi-down", (xi_m.rows() * xi_m.cols()) as u64, digest_dense(&xi_m))?;
        let us: Vec<DenseMatrix> = cluster.map_machines(|_| &y * &top_left(&xi_m, p.k));
        let agree = us.iter().all(|ui| ui.bit_eq(&us[0]));
        (us[0].clone(), agree)
    } else {
        let u = &y * &top_left(&xi_m, p.k);
        ledger.broadcast("u-down", (m * p.k) as u64, digest_dense(&u))?;
        (u, true)
    };

    let checks = if p.check {
        let a = cluster.global_dense();
        let c = CssChecks {
            tail: tail_sq(&a, p.k),
            residual_c: colspan_residual_sq(&a, &c_mat.to_dense()),
            residual_c_tilde: colspan_residual_sq(&a, &ct_dense),
            residual_u: proj_residual_sq(&a, &u),
        };
        let slack = 1e-9 * a.frob_sq();
        if c.residual_c_tilde > c.residual_c + slack || c.residual_c_tilde > c.residual_u + slack {
            return Err(Error::Internal(format!(
                "residual chain broken: C̃ {} vs C {} vs U {}",
                c.residual_c_tilde, c.residual_c, c.residual_u
            )));
        }
        Some(c)
    } else {
        None
    };

    Ok(CssOutcome {
        columns,
        c_tilde,
        u,
        ledger,
        sent_all,
        adaptive_skipped,
        t,
        betas,
        machines_agree,
        checks,
        instrument,
    })
}

/// Artifact constants `(C1, C2)` for the column protocol bound.
pub const CSS_COMM_CONSTANTS: (f64, f64) = (334.0, 27225.0);

/// `C1·s·k·φ/ε + C2·s·k²/ε⁴ + s·m·k`, the last term paying for the broadcast of `U`.
pub fn css_comm_bound(s: usize, m: usize, k: usize, eps: f64, phi: usize) -> f64 {
    let (s, m, k, phi) = (s as f64, m as f64, k as f64, phi.max(1) as f64);
    CSS_COMM_CONSTANTS.0 * s * k * phi / eps + CSS_COMM_CONSTANTS.1 * s * k * k / eps.powi(4) + s * m * k
}
