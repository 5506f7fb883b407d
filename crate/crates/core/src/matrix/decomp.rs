use super::DenseMatrix;
use crate::error::{shape, Result};
use nalgebra::DMatrix;

/// Relative singular-value cutoff used when no tolerance is given.
pub fn default_rank_tol(rows: usize, cols: usize) -> f64 {
    1e-10 * rows.max(cols).max(1) as f64
}

/// Thin singular value decomposition `A = U diag(sigma) Vᵀ`.
///
/// Singular values are sorted descending. Each pair is signed so the
/// largest-magnitude entry of the left vector is positive (first such row on ties).
#[derive(Clone, Debug)]
pub struct SvdFactors {
    pub u: DenseMatrix,
    pub sigma: Vec<f64>,
    pub v: DenseMatrix,
}

impl SvdFactors {
    pub fn rank_k(&self, k: usize) -> SvdFactors {
        let k = k.min(self.sigma.len());
        SvdFactors {
            u: self.u.leading_cols(k),
            sigma: self.sigma[..k].to_vec(),
            v: self.v.leading_cols(k),
        }
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        let mut us = self.u.clone();
        for (j, s) in self.sigma.iter().enumerate() {
            for i in 0..us.rows() {
                us[(i, j)] *= s;
            }
        }
        &us * &self.v.t()
    }
}

pub fn svd(a: &DenseMatrix) -> SvdFactors {
    let (m, n) = a.shape();
    let r = m.min(n);
    if r == 0 {
        return SvdFactors {
            u: DenseMatrix::zeros(m, 0),
            sigma: Vec::new(),
            v: DenseMatrix::zeros(n, 0),
        };
    }
    let dec = a.as_na().clone().svd(true, true);
    let u = dec.u.expect("left vectors requested");
    let vt = dec.v_t.expect("right vectors requested");
    let sv = dec.singular_values;
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&x, &y| sv[y].total_cmp(&sv[x]).then(x.cmp(&y)));
    let mut uo = DMatrix::zeros(m, r);
    let mut vo = DMatrix::zeros(n, r);
    let mut sigma = Vec::with_capacity(r);
    for (dst, &src) in order.iter().enumerate() {
        let col = u.column(src);
        let mut best = 0;
        for i in 1..m {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        let flip = if col[best] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..m {
            uo[(i, dst)] = flip * u[(i, src)];
        }
        for j in 0..n {
            vo[(j, dst)] = flip * vt[(src, j)];
        }
        sigma.push(sv[src]);
    }
    SvdFactors {
        u: DenseMatrix::from_na(uo),
        sigma,
        v: DenseMatrix::from_na(vo),
    }
}

/// Top-`k` singular triplets and the residual `‖A − A_k‖_F²`.
pub fn truncated_svd(a: &DenseMatrix, k: usize) -> Result<(SvdFactors, f64)> {
    let r = a.rows().min(a.cols());
    if k > r {
        return shape(format!("rank {k} exceeds min dimension {r}"));
    }
    let f = svd(a);
    let residual = f.sigma[k..].iter().map(|s| s * s).sum();
    Ok((f.rank_k(k), residual))
}

/// `‖A − A_k‖_F²`, zero when `k` reaches the smaller dimension.
pub fn tail_sq(a: &DenseMatrix, k: usize) -> f64 {
    let f = svd(a);
    f.sigma.iter().skip(k).map(|s| s * s).sum()
}

pub fn numeric_rank(a: &DenseMatrix, tol: Option<f64>) -> usize {
    let tol = tol.unwrap_or_else(|| default_rank_tol(a.rows(), a.cols()));
    let f = svd(a);
    count_above(&f.sigma, tol)
}

fn count_above(sigma: &[f64], tol: f64) -> usize {
    let smax = sigma.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return 0;
    }
    sigma.iter().take_while(|&&s| s > tol * smax).count()
}

/// Moore–Penrose pseudoinverse with a relative singular-value cutoff.
pub fn pinv(a: &DenseMatrix, tol: Option<f64>) -> DenseMatrix {
    let tol = tol.unwrap_or_else(|| default_rank_tol(a.rows(), a.cols()));
    let f = svd(a);
    let r = count_above(&f.sigma, tol);
    let mut vs = f.v.leading_cols(r);
    for j in 0..r {
        for i in 0..vs.rows() {
            vs[(i, j)] /= f.sigma[j];
        }
    }
    &vs * &f.u.leading_cols(r).t()
}

/// Thin Householder QR of a matrix with at least as many rows as columns.
/// Diagonal of `R` is made nonnegative.
pub fn qr(a: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
    let (m, n) = a.shape();
    if m < n {
        return shape(format!("qr needs rows >= cols, got {m}x{n}"));
    }
    if n == 0 {
        return Ok((DenseMatrix::zeros(m, 0), DenseMatrix::zeros(0, 0)));
    }
    let dec = a.as_na().clone().qr();
    let mut q = dec.q();
    let mut r = dec.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            for c in 0..n {
                r[(j, c)] = -r[(j, c)];
            }
            for i in 0..m {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    Ok((DenseMatrix::from_na(q), DenseMatrix::from_na(r)))
}

/// Orthonormal basis of the numerical column space.
pub fn orthonormal_basis(a: &DenseMatrix, tol: Option<f64>) -> DenseMatrix {
    let tol = tol.unwrap_or_else(|| default_rank_tol(a.rows(), a.cols()));
    let f = svd(a);
    let r = count_above(&f.sigma, tol);
    f.u.leading_cols(r)
}

/// Column basis that is the QR factor when `a` has full column rank and an
/// SVD-derived basis otherwise.
pub fn column_basis(a: &DenseMatrix) -> (DenseMatrix, DenseMatrix) {
    let c = a.cols();
    if a.rows() >= c && numeric_rank(a, None) == c {
        if let Ok((q, r)) = qr(a) {
            return (q, r);
        }
    }
    let y = orthonormal_basis(a, None);
    let psi = &y.t() * a;
    (y, psi)
}

/// `‖A − U Uᵀ A‖_F²` for `U` with orthonormal columns.
pub fn proj_residual_sq(a: &DenseMatrix, u: &DenseMatrix) -> f64 {
    let r = a - &(u * &(&u.t() * a));
    r.frob_sq()
}

/// `‖A − C C⁺ A‖_F²`.
pub fn colspan_residual_sq(a: &DenseMatrix, c: &DenseMatrix) -> f64 {
    let y = orthonormal_basis(c, None);
    proj_residual_sq(a, &y)
}

/// Factors of the best rank-`k` approximation of `A` inside the column span of `V`.
#[derive(Clone, Debug)]
pub struct ColSpanApprox {
    /// Orthonormal basis of span(V).
    pub y: DenseMatrix,
    /// Coefficients with `V = Y Ψ`.
    pub psi: DenseMatrix,
    /// Top left singular vectors of `Yᵀ A`.
    pub delta: DenseMatrix,
}

impl ColSpanApprox {
    pub fn basis(&self) -> DenseMatrix {
        &self.y * &self.delta
    }

    pub fn approximation(&self, a: &DenseMatrix) -> DenseMatrix {
        let b = self.basis();
        &b * &(&b.t() * a)
    }
}

pub fn best_rank_k_in_colspan(a: &DenseMatrix, v: &DenseMatrix, k: usize) -> Result<ColSpanApprox> {
    if v.rows() != a.rows() {
        return shape("V must have as many rows as A");
    }
    if k >= v.cols() {
        return shape(format!("k = {k} must be below the {} columns of V", v.cols()));
    }
    let (y, psi) = column_basis(v);
    let xi = &y.t() * a;
    let f = svd(&xi);
    let delta = f.u.leading_cols(k.min(f.sigma.len()));
    Ok(ColSpanApprox { y, psi, delta })
}

/// Row-space analogue: best rank-`k` approximation with rows in span of the rows of `W`.
/// Returned factors describe the transposed problem, so the approximation is
/// `A Y Δ Δᵀ Yᵀ`.
pub fn best_rank_k_in_rowspan(a: &DenseMatrix, w: &DenseMatrix, k: usize) -> Result<ColSpanApprox> {
    if w.cols() != a.cols() {
        return shape("W must have as many columns as A");
    }
    best_rank_k_in_colspan(&a.t(), &w.t(), k)
}

/// Minimum-norm minimizer of `‖N X L − M‖_F` over rank-`k` matrices `X`:
/// `X = N⁺ (P_N M P_L)_k L⁺` with `P_N`, `P_L` the projections onto the
/// column space of `N` and the row space of `L`.
pub fn rank_constrained_affine_solve(
    m: &DenseMatrix,
    n: &DenseMatrix,
    l: &DenseMatrix,
    k: usize,
) -> Result<DenseMatrix> {
    if n.rows() != m.rows() || l.cols() != m.cols() {
        return shape(format!(
            "affine solve shapes N {:?}, M {:?}, L {:?} do not chain",
            n.shape(),
            m.shape(),
            l.shape()
        ));
    }
    let fn_ = svd(n);
    let fl = svd(l);
    let rn = count_above(&fn_.sigma, default_rank_tol(n.rows(), n.cols()));
    let rl = count_above(&fl.sigma, default_rank_tol(l.rows(), l.cols()));
    if rn == 0 || rl == 0 {
        return Ok(DenseMatrix::zeros(n.cols(), l.rows()));
    }
    let un = fn_.u.leading_cols(rn);
    let wn = fn_.v.leading_cols(rn);
    let zl = fl.u.leading_cols(rl);
    let vl = fl.v.leading_cols(rl);
    let p = &(&un.t() * m) * &vl;
    let fp = svd(&p);
    let kk = k.min(fp.sigma.len());
    let pk = fp.rank_k(kk).reconstruct();
    let mut left = wn;
    for j in 0..rn {
        let s = fn_.sigma[j];
        for i in 0..left.rows() {
            left[(i, j)] /= s;
        }
    }
    let mut right = zl.t();
    for i in 0..rl {
        let s = fl.sigma[i];
        for j in 0..right.cols() {
            right[(i, j)] /= s;
        }
    }
    Ok(&(&left * &pk) * &right)
}

/// Rounds every entry to the nearest integer multiple of `rho`.
pub fn round_to_grid(a: &DenseMatrix, rho: f64) -> DenseMatrix {
    DenseMatrix::from_fn(a.rows(), a.cols(), |i, j| (a[(i, j)] / rho).round() * rho)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rnd(m: usize, n: usize, seed: u64) -> DenseMatrix {
        let mut z = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
        DenseMatrix::from_fn(m, n, |_, _| {
            z ^= z << 13;
            z ^= z >> 7;
            z ^= z << 17;
            (z % 2001) as f64 / 1000.0 - 1.0
        })
    }

    #[test]
    fn svd_identity_and_zero() {
        let f = svd(&DenseMatrix::identity(3));
        assert_eq!(f.sigma, vec![1.0, 1.0, 1.0]);
        let z = svd(&DenseMatrix::zeros(2, 3));
        assert_eq!(z.sigma, vec![0.0, 0.0]);
    }

    #[test]
    fn svd_reconstructs_and_is_orthonormal() {
        let a = rnd(5, 4, 1);
        let f = svd(&a);
        assert!(f.reconstruct().max_abs_diff(&a) <= 1e-9 * a.frob());
        assert!((&f.u.t() * &f.u).max_abs_diff(&DenseMatrix::identity(4)) <= 1e-8);
        assert!(f.sigma.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn truncation_of_diagonal() {
        let mut a = DenseMatrix::zeros(3, 3);
        a[(0, 0)] = 3.0;
        a[(1, 1)] = 2.0;
        a[(2, 2)] = 1.0;
        let (f, tail) = truncated_svd(&a, 2).unwrap();
        assert_eq!(f.sigma, vec![3.0, 2.0]);
        assert!((tail - 1.0).abs() < 1e-12);
        assert!(truncated_svd(&a, 4).is_err());
    }

    #[test]
    fn pinv_drops_zero_singular_values() {
        let mut a = DenseMatrix::zeros(2, 2);
        a[(0, 0)] = 2.0;
        let p = pinv(&a, None);
        assert!((p[(0, 0)] - 0.5).abs() < 1e-15 && p[(1, 1)] == 0.0);
        let b = rnd(5, 3, 2);
        let pb = pinv(&b, None);
        assert!((&pb * &b).max_abs_diff(&DenseMatrix::identity(3)) <= 1e-7);
    }

    #[test]
    fn qr_normalizes_a_column() {
        let a = DenseMatrix::from_row_major(2, 1, vec![3.0, 4.0]).unwrap();
        let (y, r) = qr(&a).unwrap();
        assert!((y[(0, 0)].abs() - 0.6).abs() < 1e-15 && (r[(0, 0)].abs() - 5.0).abs() < 1e-14);
        let b = rnd(8, 3, 3);
        let (y, r) = qr(&b).unwrap();
        assert!((&y * &r).max_abs_diff(&b) <= 1e-9);
    }

    #[test]
    fn colspan_optimum_when_span_contains_a() {
        let v = rnd(6, 3, 4);
        let x = rnd(3, 8, 5);
        let a = &v * &x;
        let f = best_rank_k_in_colspan(&a, &v, 2).unwrap();
        let resid = (&a - &f.approximation(&a)).frob_sq();
        assert!((resid - tail_sq(&a, 2)).abs() <= 1e-8 * a.frob_sq());
        assert!(best_rank_k_in_colspan(&a, &v, 3).is_err());
    }

    #[test]
    fn affine_solve_with_identities_is_truncated_svd() {
        let m = rnd(5, 5, 6);
        let id = DenseMatrix::identity(5);
        let x = rank_constrained_affine_solve(&m, &id, &id, 2).unwrap();
        let (f, _) = truncated_svd(&m, 2).unwrap();
        assert!(x.max_abs_diff(&f.reconstruct()) <= 1e-10);
    }

    #[test]
    fn grid_rounding() {
        let a = DenseMatrix::from_row_major(1, 3, vec![0.26, -0.24, 0.5]).unwrap();
        let r = round_to_grid(&a, 0.5);
        assert_eq!(r.to_row_major(), vec![0.5, -0.0, 0.5]);
    }
}
