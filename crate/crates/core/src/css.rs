//! Column subset selection kernels: dual-set spectral/Frobenius sparsification,
//! deterministic selection, adaptive residual sampling and the sketched subspace SVD.

use crate::error::{input, Error, Result};
use crate::matrix::{
    best_rank_k_in_colspan, colspan_residual_sq, column_basis, svd, tail_sq, DenseMatrix, SparseColMatrix,
};
use crate::sketch::{SignSketch, SketchSeed};
use nalgebra::{DMatrix, SymmetricEigen};

/// Sampling-and-rescaling matrix `S`: column `t` is `√weights[t] · e_{indices[t]}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMatrix {
    pub n: usize,
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

impl SamplingMatrix {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `A S` (rescaled columns).
    pub fn apply(&self, a: &DenseMatrix) -> DenseMatrix {
        DenseMatrix::from_fn(a.rows(), self.len(), |i, t| {
            a[(i, self.indices[t])] * self.weights[t].sqrt()
        })
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut s = DenseMatrix::zeros(self.n, self.len());
        for (t, (&i, &w)) in self.indices.iter().zip(&self.weights).enumerate() {
            s[(i, t)] = w.sqrt();
        }
        s
    }
}

fn sym_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let e = SymmetricEigen::new(a.clone());
    (e.eigenvalues.iter().copied().collect(), e.eigenvectors)
}

/// Smallest eigenvalue of `Vᵀ S Sᵀ V`, i.e. `σ_k²(Vᵀ S)`.
pub fn sigma_k_sq(v: &DenseMatrix, s: &SamplingMatrix) -> f64 {
    let k = v.cols();
    let mut g = DMatrix::zeros(k, k);
    for (&i, &w) in s.indices.iter().zip(&s.weights) {
        for a in 0..k {
            for b in 0..k {
                g[(a, b)] += w * v[(i, a)] * v[(i, b)];
            }
        }
    }
    let (ev, _) = sym_eigen(&g);
    ev.into_iter().fold(f64::INFINITY, f64::min)
}

/// `‖E S‖_F²`.
pub fn frob_sampled_sq(e: &DenseMatrix, s: &SamplingMatrix) -> f64 {
    s.indices
        .iter()
        .zip(&s.weights)
        .map(|(&i, &w)| w * e.col_norm_sq(i))
        .sum()
}

/// Deterministic two-barrier greedy selection of at most `ell` columns.
///
/// Given `V` (`w × k`, orthonormal columns) and `E` (`m × w`), returns weights with
/// `σ_k²(Vᵀ S) ≥ (1 − √(k/ℓ))²` and `‖E S‖_F² ≤ ‖E‖_F²`. Both are checked before
/// returning.
pub fn bss_sampling(v: &DenseMatrix, e: &DenseMatrix, ell: usize) -> Result<SamplingMatrix> {
    let (w, k) = v.shape();
    if e.cols() != w {
        return input(format!("E has {} columns, V has {w} rows", e.cols()));
    }
    if k == 0 || ell <= k {
        return input(format!("need 0 < k < ell, got k = {k}, ell = {ell}"));
    }
    let gram = &v.t() * v;
    if gram.max_abs_diff(&DenseMatrix::identity(k)) > 1e-8 {
        return input("V must have orthonormal columns");
    }
    let (kf, lf) = (k as f64, ell as f64);
    let ratio = (kf / lf).sqrt();
    let e_total = e.frob_sq();
    let delta_u = e_total / (1.0 - ratio);
    let col_sq: Vec<f64> = (0..w).map(|i| e.col_norm_sq(i)).collect();
    let mut a = DMatrix::<f64>::zeros(k, k);
    let mut s = vec![0.0; w];

    for tau in 0..ell {
        let l_now = tau as f64 - (lf * kf).sqrt();
        let l_next = l_now + 1.0;
        let (lam, q) = sym_eigen(&a);
        let phi_now: f64 = lam.iter().map(|x| 1.0 / (x - l_now)).sum();
        let phi_next: f64 = lam.iter().map(|x| 1.0 / (x - l_next)).sum();
        let gap = phi_next - phi_now;
        let mut best: Option<(bool, f64, usize, f64, f64)> = None;
        for i in 0..w {
            let mut inv1 = 0.0;
            let mut inv2 = 0.0;
            for j in 0..k {
                let y: f64 = (0..k).map(|t| q[(t, j)] * v[(i, t)]).sum();
                let d = lam[j] - l_next;
                inv1 += y * y / d;
                inv2 += y * y / (d * d);
            }
            let lower = inv2 / gap - inv1;
            let upper = if delta_u > 0.0 { col_sq[i] / delta_u } else { 0.0 };
            if lower <= 0.0 || upper > lower {
                continue;
            }
            let fresh = s[i] == 0.0;
            let margin = lower - upper;
            let better = match best {
                None => true,
                Some((bf, bm, ..)) => (fresh && !bf) || (fresh == bf && margin > bm),
            };
            if better {
                best = Some((fresh, margin, i, lower, upper));
            }
        }
        let Some((_, _, i, lower, upper)) = best else {
            return Err(Error::Internal(format!(
                "no admissible column at step {tau} of the barrier greedy"
            )));
        };
        let t = 2.0 / (lower + upper);
        s[i] += t;
        for p in 0..k {
            for r in 0..k {
                a[(p, r)] += t * v[(i, p)] * v[(i, r)];
            }
        }
    }

    let scale = (1.0 - ratio) / lf;
    let (indices, weights): (Vec<usize>, Vec<f64>) = s
        .iter()
        .enumerate()
        .filter(|(_, &x)| x > 0.0)
        .map(|(i, &x)| (i, x * scale))
        .unzip();
    let out = SamplingMatrix {
        n: w,
        indices,
        weights,
    };
    let floor = (1.0 - ratio).powi(2);
    let sig = sigma_k_sq(v, &out);
    if sig < floor * (1.0 - 1e-9) {
        return Err(Error::Internal(format!(
            "spectral bound violated: {sig} < {floor}"
        )));
    }
    let fro = frob_sampled_sq(e, &out);
    if fro > e_total * (1.0 + 1e-9) + 1e-300 {
        return Err(Error::Internal(format!(
            "Frobenius bound violated: {fro} > {e_total}"
        )));
    }
    Ok(out)
}

/// Top-`k` right singular vectors of `g` and the residual `g − g V Vᵀ`.
pub fn right_split(g: &DenseMatrix, k: usize) -> (DenseMatrix, DenseMatrix) {
    let f = svd(g);
    let v = f.v.leading_cols(k.min(f.v.cols()));
    let e = g - &(&(g * &v) * &v.t());
    (v, e)
}

/// Result of a column selection over the columns of some matrix `G`.
#[derive(Clone, Debug)]
pub struct CssSelection {
    /// Selected column indices of `G`, distinct.
    pub indices: Vec<usize>,
    /// `‖G − C C⁺ G‖_F²`.
    pub residual: f64,
    /// `‖G − G_k‖_F²`.
    pub tail: f64,
    /// Guaranteed factor on `tail`.
    pub factor: f64,
}

/// Tops `chosen` up to `c` distinct columns, preferring the largest residual norms.
/// Extra columns never increase the projection error.
pub(crate) fn pad_selection(chosen: &mut Vec<usize>, e: &DenseMatrix, c: usize) {
    if chosen.len() >= c {
        return;
    }
    let mut rest: Vec<usize> = (0..e.cols()).filter(|j| !chosen.contains(j)).collect();
    rest.sort_by(|&a, &b| e.col_norm_sq(b).total_cmp(&e.col_norm_sq(a)).then(a.cmp(&b)));
    chosen.extend(rest.into_iter().take(c - chosen.len()));
}

/// Picks `c` columns of `G` with `‖G − C C⁺ G‖_F² ≤ (1 + (1 − √(k/c))⁻²)·‖G − G_k‖_F²`.
pub fn deterministic_css(g: &DenseMatrix, k: usize, c: usize) -> Result<CssSelection> {
    let (m, a) = g.shape();
    if k == 0 || k > m.min(a) {
        return input(format!("k = {k} must lie in 1..={}", m.min(a)));
    }
    if c <= k {
        return input(format!("c = {c} must exceed k = {k}"));
    }
    let tail = tail_sq(g, k);
    let factor = 1.0 + (1.0 - (k as f64 / c as f64).sqrt()).powi(-2);
    let indices: Vec<usize> = if c >= a {
        (0..a).collect()
    } else {
        let (v, e) = right_split(g, k);
        let s = bss_sampling(&v, &e, c)?;
        let mut idx = s.indices.clone();
        pad_selection(&mut idx, &e, c);
        idx
    };
    let residual = colspan_residual_sq(g, &g.select_cols(&indices));
    if residual > factor * tail * (1.0 + 1e-9) + 1e-12 * g.frob_sq() {
        return Err(Error::Internal(format!(
            "selection residual {residual} exceeds {factor}·{tail}"
        )));
    }
    Ok(CssSelection {
        indices,
        residual,
        tail,
        factor,
    })
}

/// Smallest power of two at or above `x`, or zero when `x ≤ 1e-24`.
pub fn residual_beta(x: f64) -> f64 {
    if x <= 1e-24 {
        return 0.0;
    }
    let mut p = 2f64.powi(x.log2().ceil() as i32);
    while p < x {
        p *= 2.0;
    }
    while p / 2.0 >= x {
        p /= 2.0;
    }
    p
}

/// Draws `count` indices with replacement from the distribution proportional to
/// `weights`, by inverting the cumulative sum at uniform points from `seed`.
pub fn sample_by_weights(weights: &[f64], count: usize, seed: SketchSeed) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 || weights.is_empty() {
        return Vec::new();
    }
    let mut cum = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        acc += w;
        cum.push(acc);
    }
    (0..count)
        .map(|t| {
            let u = seed.unit(t, 0) * acc;
            let pos = cum.partition_point(|&c| c <= u);
            let mut j = pos.min(weights.len() - 1);
            while weights[j] == 0.0 && j > 0 {
                j -= 1;
            }
            j
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct AdaptiveSample {
    pub indices: Vec<usize>,
    /// `‖Ψ‖_F²` of the residual the sample was drawn from.
    pub residual: f64,
    /// Set when the residual vanished and nothing was drawn.
    pub empty: bool,
}

/// Column norms of `Ψ = A − V V⁺ A`.
pub fn residual_col_norms(a: &DenseMatrix, v: &DenseMatrix) -> Vec<f64> {
    let psi = if v.cols() == 0 {
        a.clone()
    } else {
        let (y, _) = column_basis(v);
        a - &(&y * &(&y.t() * a))
    };
    (0..a.cols()).map(|j| psi.col_norm_sq(j)).collect()
}

/// Samples `c2` columns of `A` with probability proportional to the squared column
/// norms of `A − V V⁺ A`.
///
/// Probabilities are exact, so they satisfy the `β`-approximation premise for any
/// `0 < β ≤ 1`; `β` is only validated here.
pub fn adaptive_cols(
    a: &DenseMatrix,
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
    let norms = residual_col_norms(a, v);
    let residual: f64 = norms.iter().sum();
    if residual <= 1e-24 {
        return Ok(AdaptiveSample {
            indices: Vec::new(),
            residual,
            empty: true,
        });
    }
    Ok(AdaptiveSample {
        indices: sample_by_weights(&norms, c2, seed),
        residual,
        empty: false,
    })
}

/// Expected-error bound `‖A − A_k‖² + k/(β c2)·‖Ψ‖²` for adaptive sampling.
pub fn adaptive_bound(tail: f64, k: usize, c2: usize, beta: f64, psi: f64) -> f64 {
    tail + k as f64 / (beta * c2 as f64) * psi
}

/// `A · Wᵀ` for sparse `A` where column `j` of `A` meets column `offset + j` of `W`.
pub fn sparse_sign_product(a: &SparseColMatrix, w: &SignSketch, offset: usize) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(a.rows(), w.out_dim);
    for j in 0..a.cols() {
        let (r, v) = a.column(j);
        if r.is_empty() {
            continue;
        }
        for q in 0..w.out_dim {
            let s = w.entry(q, offset + j);
            for (&i, &x) in r.iter().zip(v) {
                out[(i, q)] += s * x;
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct SubspaceSvd {
    /// Orthonormal basis of span(V).
    pub y: DenseMatrix,
    pub delta: DenseMatrix,
}

impl SubspaceSvd {
    pub fn u(&self) -> DenseMatrix {
        &self.y * &self.delta
    }
}

/// Sketch width `⌈8c/ε²⌉` used for the restricted SVD.
pub fn subspace_sketch_dim(c: usize, eps: f64) -> usize {
    (8.0 * c as f64 / (eps * eps)).ceil() as usize
}

/// Top-`k` left singular vectors of `Ξ`, padded with further basis directions when
/// `Ξ` has fewer than `k` columns.
pub(crate) fn top_left(xi: &DenseMatrix, k: usize) -> DenseMatrix {
    let f = svd(xi);
    let r = xi.rows();
    if f.u.cols() >= k {
        return f.u.leading_cols(k);
    }
    let mut full = nalgebra::DMatrix::<f64>::identity(r, r);
    full.columns_mut(0, f.u.cols()).copy_from(f.u.as_na());
    let q = DenseMatrix::from_na(full.qr().q());
    let extra = q.select_cols(&(f.u.cols()..k).collect::<Vec<_>>());
    DenseMatrix::hcat(&[&f.u, &extra]).expect("row counts agree")
}

/// Sketched best rank-`k` approximation inside span(V): `U = Y Δ` where `Y` spans `V`
/// and `Δ` holds the top left singular vectors of `Ξ = Yᵀ A Wᵀ`.
pub fn approx_subspace_svd(
    a: &DenseMatrix,
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
    let xi = subspace_sketch_dim(v.cols(), eps);
    let w = SignSketch::new(xi, a.cols(), seed);
    let aw = &w.to_dense() * &a.t();
    let xi_m = &y.t() * &aw.t();
    let delta = top_left(&xi_m, k);
    Ok(SubspaceSvd { y, delta })
}

/// Error of the best rank-`k` approximation of `A` inside the span of `C`.
pub fn best_in_span_error(a: &DenseMatrix, c: &DenseMatrix, k: usize) -> Result<f64> {
    if k >= c.cols() {
        return Ok(colspan_residual_sq(a, c));
    }
    let ap = best_rank_k_in_colspan(a, c, k)?;
    Ok((a - &ap.approximation(a)).frob_sq())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::gaussian;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn beta_rounds_up_to_a_power_of_two() {
        assert_eq!(residual_beta(5.0), 8.0);
        assert_eq!(residual_beta(4.0), 4.0);
        assert_eq!(residual_beta(0.3), 0.5);
        assert_eq!(residual_beta(0.0), 0.0);
    }

    #[test]
    fn dual_set_sampling_meets_both_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = gaussian(12, 30, &mut rng);
        let (v, e) = right_split(&g, 3);
        let s = bss_sampling(&v, &e, 12).unwrap();
        assert!(s.len() <= 12);
        let lower = (1.0 - (3.0f64 / 12.0).sqrt()).powi(2);
        assert!(sigma_k_sq(&v, &s) >= lower - 1e-12);
        assert!(frob_sampled_sq(&e, &s) <= e.frob_sq() * (1.0 + 1e-12));
    }

    #[test]
    fn non_orthonormal_v_is_rejected() {
        let v = DenseMatrix::from_fn(6, 2, |i, j| (i + j) as f64);
        let e = DenseMatrix::zeros(3, 6);
        assert!(bss_sampling(&v, &e, 4).is_err());
    }

    #[test]
    fn deterministic_selection_size_and_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = gaussian(10, 30, &mut rng);
        let sel = deterministic_css(&g, 2, 8).unwrap();
        assert_eq!(sel.indices.len(), 8);
        assert!(sel.residual <= sel.factor * sel.tail);
        assert!((sel.factor - 5.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_sampling_never_picks_zero_weight() {
        let w = [0.0, 1.0, 0.0, 3.0];
        let idx = sample_by_weights(&w, 200, SketchSeed::new(1, 1));
        assert_eq!(idx.len(), 200);
        assert!(idx.iter().all(|&i| i == 1 || i == 3));
        let threes = idx.iter().filter(|&&i| i == 3).count();
        assert!((110..190).contains(&threes));
    }

    #[test]
    fn adaptive_on_spanned_input_draws_nothing() {
        let a = DenseMatrix::from_fn(4, 6, |i, j| (i * j) as f64);
        let s = adaptive_cols(&a, &a, 5, 1.0, SketchSeed::new(0, 0)).unwrap();
        assert!(s.empty && s.indices.is_empty());
        assert!(adaptive_cols(&a, &a, 5, 1.5, SketchSeed::new(0, 0)).is_err());
    }

    #[test]
    fn subspace_svd_is_near_optimal_in_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = gaussian(15, 40, &mut rng);
        let c = a.select_cols(&(0..10).collect::<Vec<_>>());
        let r = approx_subspace_svd(&a, &c, 3, 0.5, SketchSeed::new(2, 40)).unwrap();
        let u = r.u();
        assert!((&u.t() * &u).max_abs_diff(&DenseMatrix::identity(u.cols())) < 1e-8);
        let best = best_in_span_error(&a, &c, 3).unwrap();
        let got = (&a - &(&u * &(&u.t() * &a))).frob_sq();
        assert!(got >= best - 1e-9 && got <= 1.5 * best);
    }
}
