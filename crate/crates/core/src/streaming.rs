//! Turnstile streams and the one-pass and two-pass streaming PCA algorithms.

use crate::batch::{basis_of, check_k, lift};
use crate::dist_arb::{ArbParams, ArbSketches, Branch};
use crate::error::{input, Error, Result};
use crate::exact::{ExactMatrix, ExactSum};
use crate::harness::agreed_seed;
use crate::matrix::{numeric_rank, rank_constrained_affine_solve, round_to_grid, svd, truncated_svd, DenseMatrix};
use crate::sketch::{mix64, SignSketch, SketchConstants, SketchSeed, Srht};
use serde::Serialize;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

/// One additive update `A[i, j] += x`, indices 0-based.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreamUpdate {
    pub i: usize,
    pub j: usize,
    pub x: f64,
}

impl StreamUpdate {
    fn check(&self, m: usize, n: usize) -> Result<()> {
        if self.i >= m || self.j >= n {
            return input(format!(
                "update ({}, {}) outside a {m} × {n} matrix",
                self.i + 1,
                self.j + 1
            ));
        }
        if !self.x.is_finite() {
            return Err(Error::NonFinite {
                row: self.i,
                col: self.j,
            });
        }
        Ok(())
    }
}

/// A source that can be read from the beginning more than once.
pub trait Replayable {
    fn shape(&self) -> (usize, usize);
    fn replay(&mut self, sink: &mut dyn FnMut(StreamUpdate) -> Result<()>) -> Result<()>;
}

/// In-memory stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub m: usize,
    pub n: usize,
    pub updates: Vec<StreamUpdate>,
}

impl Stream {
    pub fn new(m: usize, n: usize, updates: Vec<StreamUpdate>) -> Result<Self> {
        for u in &updates {
            u.check(m, n)?;
        }
        Ok(Self { m, n, updates })
    }

    /// Row-major stream of the nonzero entries of `a`.
    pub fn from_dense(a: &DenseMatrix) -> Self {
        let mut updates = Vec::new();
        for i in 0..a.rows() {
            for j in 0..a.cols() {
                if a[(i, j)] != 0.0 {
                    updates.push(StreamUpdate { i, j, x: a[(i, j)] });
                }
            }
        }
        Self {
            m: a.rows(),
            n: a.cols(),
            updates,
        }
    }

    /// The implied matrix, summed exactly.
    pub fn materialize(&self) -> DenseMatrix {
        let mut acc = vec![ExactSum::new(); self.m * self.n];
        for u in &self.updates {
            acc[u.i * self.n + u.j].add(u.x);
        }
        DenseMatrix::from_fn(self.m, self.n, |i, j| acc[i * self.n + j].value())
    }

    pub fn read(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines().enumerate().filter_map(|(no, l)| match l {
            Ok(s) if s.trim().is_empty() => None,
            Ok(s) => Some(Ok((no + 1, s))),
            Err(e) => Some(Err(Error::Io(e))),
        });
        let (hline, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "missing header".into(),
        })??;
        let h: Vec<&str> = header.split_whitespace().collect();
        let parse_usize = |s: &str, line: usize| {
            s.parse::<usize>().map_err(|e| Error::Parse {
                line,
                msg: format!("bad integer {s:?}: {e}"),
            })
        };
        if h.len() != 3 {
            return Err(Error::Parse {
                line: hline,
                msg: "header must be \"m n q\"".into(),
            });
        }
        let (m, n, q) = (
            parse_usize(h[0], hline)?,
            parse_usize(h[1], hline)?,
            parse_usize(h[2], hline)?,
        );
        let mut updates = Vec::with_capacity(q);
        for item in lines.by_ref().take(q) {
            let (line, text) = item?;
            let f: Vec<&str> = text.split_whitespace().collect();
            if f.len() != 3 {
                return Err(Error::Parse {
                    line,
                    msg: "expected \"i j x\"".into(),
                });
            }
            let (i, j) = (parse_usize(f[0], line)?, parse_usize(f[1], line)?);
            let x: f64 = f[2].parse().map_err(|e| Error::Parse {
                line,
                msg: format!("bad value {:?}: {e}", f[2]),
            })?;
            if i == 0 || j == 0 || i > m || j > n {
                return Err(Error::Parse {
                    line,
                    msg: format!("index ({i}, {j}) outside 1..={m} × 1..={n}"),
                });
            }
            if !x.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: "non-finite value".into(),
                });
            }
            updates.push(StreamUpdate { i: i - 1, j: j - 1, x });
        }
        if updates.len() != q {
            return Err(Error::Parse {
                line: hline,
                msg: format!("header promises {q} updates, found {}", updates.len()),
            });
        }
        if let Some(extra) = lines.next() {
            let (line, _) = extra?;
            return Err(Error::Parse {
                line,
                msg: "trailing data after the last update".into(),
            });
        }
        Ok(Self { m, n, updates })
    }

    pub fn read_path(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(f))
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{} {} {}", self.m, self.n, self.updates.len())?;
        for u in &self.updates {
            writeln!(w, "{} {} {:e}", u.i + 1, u.j + 1, u.x)?;
        }
        Ok(())
    }
}

impl Replayable for Stream {
    fn shape(&self) -> (usize, usize) {
        (self.m, self.n)
    }

    fn replay(&mut self, sink: &mut dyn FnMut(StreamUpdate) -> Result<()>) -> Result<()> {
        for &u in &self.updates {
            sink(u)?;
        }
        Ok(())
    }
}

/// Stream file re-read from disk on every pass.
#[derive(Clone, Debug)]
pub struct FileStream {
    pub path: PathBuf,
    shape: (usize, usize),
}

impl FileStream {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let s = Stream::read_path(&path)?;
        Ok(Self {
            path,
            shape: (s.m, s.n),
        })
    }
}

impl Replayable for FileStream {
    fn shape(&self) -> (usize, usize) {
        self.shape
    }

    fn replay(&mut self, sink: &mut dyn FnMut(StreamUpdate) -> Result<()>) -> Result<()> {
        let s = Stream::read_path(&self.path)?;
        if (s.m, s.n) != self.shape {
            return Err(Error::StreamReplay("stream dimensions changed between passes".into()));
        }
        for u in s.updates {
            sink(u)?;
        }
        Ok(())
    }
}

/// How maintained sketches accumulate `±x` contributions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum Accumulation {
    /// Plain floating-point sums in arrival order.
    #[default]
    Plain,
    /// Exact sums, independent of order and of how updates are split.
    Exact,
}

/// A row-major matrix of unscaled sums in either accumulation mode.
#[derive(Clone, Debug)]
enum Acc {
    Plain { rows: usize, cols: usize, v: Vec<f64> },
    Exact(ExactMatrix),
}

impl Acc {
    fn zeros(rows: usize, cols: usize, mode: Accumulation) -> Self {
        match mode {
            Accumulation::Plain => Acc::Plain {
                rows,
                cols,
                v: vec![0.0; rows * cols],
            },
            Accumulation::Exact => Acc::Exact(ExactMatrix::zeros(rows, cols)),
        }
    }

    fn shape(&self) -> (usize, usize) {
        match self {
            Acc::Plain { rows, cols, .. } => (*rows, *cols),
            Acc::Exact(e) => e.shape(),
        }
    }

    /// `self[a, :] += xa · signs` where `signs` holds `±1`.
    #[inline]
    fn add_row(&mut self, a: usize, xa: f64, signs: &[f64]) {
        match self {
            Acc::Plain { cols, v, .. } => {
                let row = &mut v[a * *cols..(a + 1) * *cols];
                for (c, s) in row.iter_mut().zip(signs) {
                    *c += xa * s;
                }
            }
            Acc::Exact(e) => {
                for (c, &s) in e.row_mut(a).iter_mut().zip(signs) {
                    c.add_signed(s < 0.0, xa);
                }
            }
        }
    }

    /// `self[a, :] += x · w` for real `w`.
    fn add_row_product(&mut self, a: usize, x: f64, w: &[f64]) {
        match self {
            Acc::Plain { cols, v, .. } => {
                let row = &mut v[a * *cols..(a + 1) * *cols];
                for (c, s) in row.iter_mut().zip(w) {
                    *c += x * s;
                }
            }
            Acc::Exact(e) => {
                for (c, &s) in e.row_mut(a).iter_mut().zip(w) {
                    c.add_product(x, s);
                }
            }
        }
    }

    fn value(&self, scale: f64) -> DenseMatrix {
        match self {
            Acc::Plain { rows, cols, v } => DenseMatrix::from_fn(*rows, *cols, |i, j| v[i * cols + j] * scale),
            Acc::Exact(e) => e.round_scaled(scale),
        }
    }
}

fn signs(neg: impl Iterator<Item = bool>) -> Vec<f64> {
    neg.map(|b| if b { -1.0 } else { 1.0 }).collect()
}

/// Sketch sizes of the one-pass algorithms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct OnePassDims {
    pub xi1: usize,
    pub xi2: usize,
    pub xi3: usize,
    pub xi4: usize,
}

impl OnePassDims {
    /// `ξ1 = ξ2 = ⌈c_reg·k/ε⌉` and `ξ3 = ξ4 = ⌈c_aff·k/ε³⌉`, the latter capped at the
    /// padded dimensions.
    pub fn new(m: usize, n: usize, k: usize, eps: f64, c: &SketchConstants) -> Self {
        let reg = c.regression_dim(k, eps);
        let aff = (c.srht_affine * k as f64 / eps.powi(3)).ceil() as usize;
        Self {
            xi1: reg,
            xi2: reg,
            xi3: aff.min(m.max(1).next_power_of_two()),
            xi4: aff.min(n.max(1).next_power_of_two()),
        }
    }

    /// `ξ3ξ4 + ξ1ξ4 + ξ3ξ2 + mξ2`, plus `ξ1·n` when `C = S·A` is kept.
    pub fn space_words(&self, m: usize, n: usize, factorization: bool) -> u64 {
        let base = self.xi3 * self.xi4 + self.xi1 * self.xi4 + self.xi3 * self.xi2 + m * self.xi2;
        (base + if factorization { self.xi1 * n } else { 0 }) as u64
    }
}

/// Random objects of the one-pass algorithms.
#[derive(Clone, Debug)]
pub struct OnePassSketches {
    pub s: SignSketch,
    /// `R` is `n × ξ2`; stored as the `ξ2 × n` sketch it transposes.
    pub r: SignSketch,
    pub t_left: Srht,
    pub t_right: Srht,
}

impl OnePassSketches {
    pub fn derive(seed: u64, m: usize, n: usize, d: &OnePassDims) -> Self {
        let root = SketchSeed::new(seed, 0);
        Self {
            s: SignSketch::new(d.xi1, m, root.child(1)),
            r: SignSketch::new(d.xi2, n, root.child(2)),
            t_left: Srht::capped(d.xi3, m, root.child(5)),
            t_right: Srht::capped(d.xi4, n, root.child(6)),
        }
    }
}

/// Maintained sketches `M = T_left A T_right`, `L = S A T_right`, `N = T_left A R`,
/// `D = A R` and optionally `C = S A`.
#[derive(Clone, Debug)]
pub struct TurnstileSketchState {
    pub m: usize,
    pub n: usize,
    pub dims: OnePassDims,
    pub sketches: OnePassSketches,
    pub updates: u64,
    mode: Accumulation,
    acc_m: Acc,
    acc_l: Acc,
    acc_n: Acc,
    acc_d: Acc,
    acc_c: Option<Acc>,
    // Cached sign columns, indexed by input coordinate.
    tl_cols: Vec<Vec<f64>>,
    s_cols: Vec<Vec<f64>>,
    tr_rows: Vec<Vec<f64>>,
    r_rows: Vec<Vec<f64>>,
}

impl TurnstileSketchState {
    pub fn new(m: usize, n: usize, dims: OnePassDims, seed: u64, factorization: bool, mode: Accumulation) -> Self {
        let sk = OnePassSketches::derive(seed, m, n, &dims);
        let (x1, x2, x3, x4) = (sk.s.out_dim, sk.r.out_dim, sk.t_left.out_dim, sk.t_right.out_dim);
        let tl_cols = (0..m).map(|i| signs((0..x3).map(|a| sk.t_left.negative(a, i)))).collect();
        let s_cols = (0..m).map(|i| signs((0..x1).map(|p| sk.s.negative(p, i)))).collect();
        let tr_rows = (0..n).map(|j| signs((0..x4).map(|b| sk.t_right.negative(b, j)))).collect();
        let r_rows = (0..n).map(|j| signs((0..x2).map(|q| sk.r.negative(q, j)))).collect();
        Self {
            m,
            n,
            dims: OnePassDims {
                xi1: x1,
                xi2: x2,
                xi3: x3,
                xi4: x4,
            },
            updates: 0,
            mode,
            acc_m: Acc::zeros(x3, x4, mode),
            acc_l: Acc::zeros(x1, x4, mode),
            acc_n: Acc::zeros(x3, x2, mode),
            acc_d: Acc::zeros(m, x2, mode),
            acc_c: factorization.then(|| Acc::zeros(x1, n, mode)),
            sketches: sk,
            tl_cols,
            s_cols,
            tr_rows,
            r_rows,
        }
    }

    pub fn mode(&self) -> Accumulation {
        self.mode
    }

    pub fn update(&mut self, u: StreamUpdate) -> Result<()> {
        u.check(self.m, self.n)?;
        let tl = &self.tl_cols[u.i];
        let sc = &self.s_cols[u.i];
        let tr = &self.tr_rows[u.j];
        let rr = &self.r_rows[u.j];
        for (a, &sa) in tl.iter().enumerate() {
            self.acc_m.add_row(a, sa * u.x, tr);
            self.acc_n.add_row(a, sa * u.x, rr);
        }
        for (p, &sp) in sc.iter().enumerate() {
            self.acc_l.add_row(p, sp * u.x, tr);
        }
        self.acc_d.add_row(u.i, u.x, rr);
        if let Some(c) = &mut self.acc_c {
            for (p, &sp) in sc.iter().enumerate() {
                match c {
                    Acc::Plain { cols, v, .. } => v[p * *cols + u.j] += sp * u.x,
                    Acc::Exact(x) => x.cell_mut(p, u.j).add_signed(sp < 0.0, u.x),
                }
            }
        }
        self.updates += 1;
        Ok(())
    }

    /// Number of scalars held in the maintained sketches.
    pub fn space_words(&self) -> u64 {
        let mut total = 0;
        for a in [&self.acc_m, &self.acc_l, &self.acc_n, &self.acc_d] {
            let (r, c) = a.shape();
            total += r * c;
        }
        if let Some(c) = &self.acc_c {
            let (r, cc) = c.shape();
            total += r * cc;
        }
        total as u64
    }

    fn scale_tl(&self) -> f64 {
        self.sketches.t_left.scale()
    }

    fn scale_tr(&self) -> f64 {
        self.sketches.t_right.scale()
    }

    pub fn m_mat(&self) -> DenseMatrix {
        self.acc_m.value(self.scale_tl() * self.scale_tr())
    }

    pub fn l_mat(&self) -> DenseMatrix {
        self.acc_l.value(self.sketches.s.scale * self.scale_tr())
    }

    pub fn n_mat(&self) -> DenseMatrix {
        self.acc_n.value(self.scale_tl() * self.sketches.r.scale)
    }

    pub fn d_mat(&self) -> DenseMatrix {
        self.acc_d.value(self.sketches.r.scale)
    }

    pub fn c_mat(&self) -> Option<DenseMatrix> {
        self.acc_c.as_ref().map(|c| c.value(self.sketches.s.scale))
    }

    /// `X* = argmin_{rank ≤ k} ‖N X L − M‖_F` and its thin SVD.
    fn solve(&self, k: usize) -> Result<crate::matrix::SvdFactors> {
        let x = rank_constrained_affine_solve(&self.m_mat(), &self.n_mat(), &self.l_mat(), k)?;
        Ok(svd(&x).rank_k(k))
    }

    /// `U` = orthonormal basis of `D · U_{X*}`.
    pub fn finish_pca(&self, k: usize) -> Result<OnePassOutcome> {
        let f = self.solve(k)?;
        let t = &self.d_mat() * &f.u;
        let (u, rank_deficient) = basis_of(&t, k)?;
        Ok(OnePassOutcome {
            u,
            rank_deficient,
            space_words: self.space_words(),
            updates: self.updates,
        })
    }

    /// `A*_k = T Σ K` with `T = D U_{X*}` and `K = V_{X*}ᵀ C`.
    pub fn finish_factorization(&self, k: usize) -> Result<FactorizationResult> {
        let c = self
            .c_mat()
            .ok_or_else(|| Error::Input("state was built without C = S·A".into()))?;
        let f = self.solve(k)?;
        Ok(FactorizationResult {
            t: &self.d_mat() * &f.u,
            sigma: f.sigma.clone(),
            k: &f.v.t() * &c,
            space_words: self.space_words(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct OnePassOutcome {
    pub u: DenseMatrix,
    pub rank_deficient: bool,
    pub space_words: u64,
    pub updates: u64,
}

/// Rank-`k` approximation in factored form `T · diag(sigma) · K`.
#[derive(Clone, Debug)]
pub struct FactorizationResult {
    pub t: DenseMatrix,
    pub sigma: Vec<f64>,
    pub k: DenseMatrix,
    pub space_words: u64,
}

impl FactorizationResult {
    pub fn materialize(&self) -> DenseMatrix {
        let ts = DenseMatrix::from_fn(self.t.rows(), self.t.cols(), |i, j| self.t[(i, j)] * self.sigma[j]);
        &ts * &self.k
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StreamParams {
    pub k: usize,
    pub eps: f64,
    pub seed: u64,
    pub constants: SketchConstants,
    pub accumulation: Accumulation,
}

impl StreamParams {
    pub fn new(k: usize, eps: f64, seed: u64) -> Self {
        Self {
            k,
            eps,
            seed,
            constants: SketchConstants::default(),
            accumulation: Accumulation::Plain,
        }
    }

    pub fn dims(&self, m: usize, n: usize) -> OnePassDims {
        OnePassDims::new(m, n, self.k, self.eps, &self.constants)
    }
}

fn one_pass_state(src: &mut dyn Replayable, p: &StreamParams, factorization: bool) -> Result<TurnstileSketchState> {
    let (m, n) = src.shape();
    check_k(p.k, p.eps, m, n)?;
    let dims = p.dims(m, n);
    if p.k > dims.xi1.min(dims.xi2) {
        return input(format!("k = {} exceeds sketch sizes", p.k));
    }
    let mut st = TurnstileSketchState::new(m, n, dims, p.seed, factorization, p.accumulation);
    src.replay(&mut |u| st.update(u))?;
    Ok(st)
}

/// Single pass over the stream; returns an orthonormal `m × k` basis.
pub fn one_pass_pca(src: &mut dyn Replayable, p: &StreamParams) -> Result<OnePassOutcome> {
    one_pass_state(src, p, false)?.finish_pca(p.k)
}

/// Single pass that additionally keeps `C = S·A` and returns `A*_k` in factored form.
pub fn one_pass_factorization(src: &mut dyn Replayable, p: &StreamParams) -> Result<FactorizationResult> {
    one_pass_state(src, p, true)?.finish_factorization(p.k)
}

/// Both outputs from one pass.
pub fn one_pass_both(src: &mut dyn Replayable, p: &StreamParams) -> Result<(OnePassOutcome, FactorizationResult)> {
    let st = one_pass_state(src, p, true)?;
    Ok((st.finish_pca(p.k)?, st.finish_factorization(p.k)?))
}

fn update_digest(h: &mut u64, u: &StreamUpdate) {
    *h = mix64(*h ^ u.i as u64);
    *h = mix64(*h ^ u.j as u64);
    *h = mix64(*h ^ u.x.to_bits());
}

#[derive(Clone, Debug)]
pub struct TwoPassOutcome {
    pub u: DenseMatrix,
    pub branch: Branch,
    pub rank_estimate: usize,
    pub rank_deficient: bool,
    pub sketch_seed: u64,
    pub eta: f64,
    pub space_words: u64,
}

/// Two passes over a replayable stream, mirroring the one-machine run of the
/// arbitrary-partition protocol with the same parameters.
///
/// Pass 1 keeps `A H''` (the rank test is `H'` applied to it) and `S A T`. Pass 2
/// keeps either `T_left A T_right` and `Cᵀ A T_right` or `A T V̂`.
pub fn two_pass_pca(src: &mut dyn Replayable, p: &ArbParams) -> Result<TwoPassOutcome> {
    let (m, n) = src.shape();
    check_k(p.k, p.eps, m, n)?;
    let dims = p.dims(m, n);
    if p.k > dims.xi1.min(dims.xi2) {
        return input(format!("k = {} exceeds sketch sizes", p.k));
    }
    let rho = p.rho.unwrap_or(1e-6);
    let seed = agreed_seed(p.seed, 0);
    let sk = ArbSketches::derive(seed, m, n, &dims);

    let hr: Vec<Vec<f64>> = (0..n).map(|j| signs((0..dims.c).map(|q| sk.h_right.negative(q, j)))).collect();
    let t_rows: Vec<Vec<f64>> = (0..n).map(|j| signs((0..dims.xi2).map(|q| sk.t.negative(q, j)))).collect();
    let s_cols: Vec<Vec<bool>> = (0..m).map(|i| (0..dims.xi1).map(|p| sk.s.negative(p, i)).collect()).collect();

    // Pass 1.
    let mut ah = Acc::zeros(m, dims.c, Accumulation::Exact);
    let mut at = ExactMatrix::zeros(dims.xi1, dims.xi2);
    let mut digest1 = 0u64;
    src.replay(&mut |u| {
        u.check(m, n)?;
        update_digest(&mut digest1, &u);
        ah.add_row(u.i, u.x, &hr[u.j]);
        for (p, &neg) in s_cols[u.i].iter().enumerate() {
            let xp = if neg { -u.x } else { u.x };
            for (cell, s) in at.row_mut(p).iter_mut().zip(&t_rows[u.j]) {
                cell.add_signed(*s < 0.0, xp);
            }
        }
        Ok(())
    })?;
    let Acc::Exact(ah) = ah else { unreachable!() };
    let hl = sk.h_left.table();
    let r = hl.left_apply_exact(&ah).round_scaled(hl.scale * sk.h_right.scale);
    let rank = numeric_rank(&r, p.rank_tol);
    let pass1_words = (m * dims.c + dims.xi1 * dims.xi2) as u64;

    let s_scale = sk.s.scale;
    let t_scale = sk.t.scale;
    let eta = match p.eta {
        Some(e) => e,
        None => {
            let b0 = at.round_scaled(s_scale * t_scale);
            ArbParams::default_eta(b0.frob(), m, n)
        }
    };

    let mut digest2 = 0u64;
    if rank > 2 * p.k {
        // Smoothed branch: add S·N·T, then X̂ = (A + N)·T·V̂ in pass 2.
        if eta > 0.0 {
            for (i, s_col) in s_cols.iter().enumerate() {
                for (j, t_row) in t_rows.iter().enumerate() {
                    let v = if sk.noise.negative(i, j) { -eta } else { eta };
                    for (pp, &neg) in s_col.iter().enumerate() {
                        let xp = if neg { -v } else { v };
                        for (cell, s) in at.row_mut(pp).iter_mut().zip(t_row) {
                            cell.add_signed(*s < 0.0, xp);
                        }
                    }
                }
            }
        }
        let b = at.round_scaled(s_scale * t_scale);
        let (f, _) = truncated_svd(&b, p.k)?;
        let v_hat = if rho > 0.0 { round_to_grid(&f.v, rho) } else { f.v };
        let w = lift(&sk.t.table_t(), &v_hat);
        let w_rows: Vec<Vec<f64>> = (0..n).map(|j| w.row(j)).collect();
        let mut x = Acc::zeros(m, p.k, Accumulation::Exact);
        src.replay(&mut |u| {
            u.check(m, n)?;
            update_digest(&mut digest2, &u);
            x.add_row_product(u.i, u.x, &w_rows[u.j]);
            Ok(())
        })?;
        if digest1 != digest2 {
            return Err(Error::StreamReplay("second pass differs from the first".into()));
        }
        if eta > 0.0 {
            for i in 0..m {
                for (j, wr) in w_rows.iter().enumerate() {
                    let v = if sk.noise.negative(i, j) { -eta } else { eta };
                    x.add_row_product(i, v, wr);
                }
            }
        }
        let (u, rank_deficient) = basis_of(&x.value(1.0), p.k)?;
        return Ok(TwoPassOutcome {
            u,
            branch: Branch::Smoothed,
            rank_estimate: rank,
            rank_deficient,
            sketch_seed: seed,
            eta,
            space_words: pass1_words.max((m * p.k + n * p.k) as u64),
        });
    }

    // Low-rank branch.
    let c = ah.round_scaled(sk.h_right.scale);
    if numeric_rank(&c, p.rank_tol) != rank {
        return Err(Error::RetryWithNewSeed(
            "rank of A·H'' disagrees with the rank test".into(),
        ));
    }
    let tl_cols: Vec<Vec<f64>> = (0..m)
        .map(|i| signs((0..sk.t_left.out_dim).map(|a| sk.t_left.negative(a, i))))
        .collect();
    let tr_rows: Vec<Vec<f64>> = (0..n)
        .map(|j| signs((0..sk.t_right.out_dim).map(|b| sk.t_right.negative(b, j))))
        .collect();
    let c_rows: Vec<Vec<f64>> = (0..m).map(|i| c.row(i)).collect();
    let mut mm = ExactMatrix::zeros(sk.t_left.out_dim, sk.t_right.out_dim);
    let mut ll = ExactMatrix::zeros(dims.c, sk.t_right.out_dim);
    src.replay(&mut |u| {
        u.check(m, n)?;
        update_digest(&mut digest2, &u);
        let tr = &tr_rows[u.j];
        for (a, &sa) in tl_cols[u.i].iter().enumerate() {
            let xa = sa * u.x;
            for (cell, s) in mm.row_mut(a).iter_mut().zip(tr) {
                cell.add_signed(*s < 0.0, xa);
            }
        }
        for (q, &cq) in c_rows[u.i].iter().enumerate() {
            if cq == 0.0 {
                continue;
            }
            for (cell, s) in ll.row_mut(q).iter_mut().zip(tr) {
                let xs = if *s < 0.0 { -u.x } else { u.x };
                cell.add_product(cq, xs);
            }
        }
        Ok(())
    })?;
    if digest1 != digest2 {
        return Err(Error::StreamReplay("second pass differs from the first".into()));
    }
    let (tl_s, tr_s) = (sk.t_left.scale(), sk.t_right.scale());
    let m_sum = mm.round_scaled(tl_s * tr_s);
    let l_sum = ll.round_scaled(tr_s);
    let tl = sk.t_left.table();
    let nm = tl.left_apply(&c).round_scaled(tl.scale);
    let x = rank_constrained_affine_solve(&m_sum, &nm, &l_sum, p.k)?;
    let f = svd(&(&c * &x));
    let u = f.u.leading_cols(p.k.min(f.u.cols()));
    let pass2_words = (m_sum.rows() * m_sum.cols() + l_sum.rows() * l_sum.cols() + c.rows() * c.cols()) as u64;
    Ok(TwoPassOutcome {
        u,
        branch: Branch::LowRank,
        rank_estimate: rank,
        rank_deficient: rank < p.k,
        sketch_seed: seed,
        eta,
        space_words: pass1_words.max(pass2_words),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn read_write_round_trip() {
        let text = "2 3 3\n1 1 1.5\n2 3 -2\n1 1 -0.5\n";
        let s = Stream::read(text.as_bytes()).unwrap();
        assert_eq!((s.m, s.n, s.updates.len()), (2, 3, 3));
        assert_eq!(s.materialize()[(0, 0)], 1.0);
        let mut buf = Vec::new();
        s.write(&mut buf).unwrap();
        let back = Stream::read(buf.as_slice()).unwrap();
        assert_eq!(back.updates, s.updates);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad_index = Stream::read("2 2 1\n3 1 1.0\n".as_bytes()).unwrap_err();
        assert!(matches!(bad_index, Error::Parse { line: 2, .. }));
        let short = Stream::read("2 2 2\n1 1 1.0\n".as_bytes()).unwrap_err();
        assert!(matches!(short, Error::Parse { line: 1, .. }));
        let trailing = Stream::read("2 2 1\n1 1 1.0\n2 2 1.0\n".as_bytes()).unwrap_err();
        assert!(matches!(trailing, Error::Parse { line: 3, .. }));
        assert!(Stream::read("".as_bytes()).is_err());
    }

    #[test]
    fn deletions_cancel_exactly() {
        let dims = OnePassDims::new(4, 5, 1, 0.5, &SketchConstants::default());
        let mut st = TurnstileSketchState::new(4, 5, dims, 3, true, Accumulation::Exact);
        st.update(StreamUpdate { i: 1, j: 2, x: 0.7 }).unwrap();
        st.update(StreamUpdate { i: 1, j: 2, x: -0.7 }).unwrap();
        assert!(st.m_mat().is_zero() && st.d_mat().is_zero() && st.c_mat().unwrap().is_zero());
        assert!(st.update(StreamUpdate { i: 4, j: 0, x: 1.0 }).is_err());
    }

    #[test]
    fn space_words_follow_the_formula() {
        let dims = OnePassDims::new(10, 12, 2, 0.5, &SketchConstants::default());
        let st = TurnstileSketchState::new(10, 12, dims, 0, false, Accumulation::Plain);
        assert_eq!(st.space_words(), dims.space_words(10, 12, false));
        assert_eq!(dims.space_words(10, 12, true) - dims.space_words(10, 12, false), (dims.xi1 * 12) as u64);
    }
}
