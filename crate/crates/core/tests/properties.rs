use dpca_core::batch::{batch_low_rank, BatchParams};
use dpca_core::css::{bss_sampling, deterministic_css, residual_beta, residual_col_norms, right_split};
use dpca_core::css_fast::{sparse_svd_counted, Instrument};
use dpca_core::dist_arb::{distributed_pca_arbitrary, noise_matrix, ArbParams, Branch};
use dpca_core::dist_css::{distributed_css_pca, CssParams};
use dpca_core::harness::{Cluster, SERVER};
use dpca_core::instances::{gaussian, gen_integer_rank, gen_lowrank_noise, gen_sparse_lowrank};
use dpca_core::matrix::{pinv, rank_constrained_affine_solve, svd, truncated_svd, DenseMatrix};
use dpca_core::sketch::{fwht, SignSketch, SketchConstants, SketchKind, SketchSeed, SketchSpec, SparseEmbedding, Srht};
use dpca_core::streaming::{Accumulation, OnePassDims, StreamUpdate, TurnstileSketchState};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn sv(a: &DenseMatrix) -> Vec<f64> {
    let mut s: Vec<f64> = a.as_na().clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

fn orthonormal(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    DenseMatrix::from_na(gaussian(rows, cols, &mut rng(seed)).into_na().qr().q())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn truncation_residual_is_the_tail(m in 2usize..9, n in 2usize..9, seed in any::<u64>(), kf in 0.0f64..1.0) {
        let a = gaussian(m, n, &mut rng(seed));
        let k = (kf * m.min(n) as f64) as usize;
        let (f, _) = truncated_svd(&a, k).unwrap();
        let resid = (&a - &f.reconstruct()).frob_sq();
        let tail: f64 = sv(&a).iter().skip(k).map(|s| s * s).sum();
        prop_assert!((resid - tail).abs() <= 1e-8 * tail.max(1e-300) + 1e-12);
    }

    #[test]
    fn orthonormal_affine_solve_matches_projection(seed in any::<u64>(), k in 1usize..3) {
        let m = gaussian(6, 5, &mut rng(seed));
        let un = orthonormal(6, 3, seed ^ 1);
        let vl = orthonormal(5, 3, seed ^ 2);
        let x = rank_constrained_affine_solve(&m, &un, &vl.t(), k).unwrap();
        let got = &(&un * &x) * &vl.t();
        let p = &(&(&un * &un.t()) * &m) * &(&vl * &vl.t());
        let (f, _) = truncated_svd(&p, k).unwrap();
        prop_assert!(got.max_abs_diff(&f.reconstruct()) <= 1e-8);
    }

    #[test]
    fn pinv_is_an_involution_when_well_conditioned(seed in any::<u64>(), m in 3usize..7, n in 3usize..7) {
        let r = m.min(n);
        let q1 = orthonormal(m, r, seed);
        let q2 = orthonormal(n, r, seed ^ 9);
        let mut g = rng(seed ^ 3);
        let d = DenseMatrix::from_fn(r, r, |i, j| if i == j { g.gen_range(1.0..10.0) } else { 0.0 });
        let a = &(&q1 * &d) * &q2.t();
        let back = pinv(&pinv(&a, None), None);
        prop_assert!((&back - &a).frob() <= 1e-6 * a.frob());
    }

    #[test]
    fn svd_is_deterministic(seed in any::<u64>()) {
        let a = gaussian(5, 7, &mut rng(seed));
        let (f, g) = (svd(&a), svd(&a));
        prop_assert!(f.u.bit_eq(&g.u) && f.v.bit_eq(&g.v) && f.sigma == g.sigma);
    }

    #[test]
    fn sketches_regenerate_bitwise(seed in any::<u64>(), id in any::<u32>(), out in 1usize..9, inn in 8usize..17) {
        let sd = SketchSeed::new(seed, id);
        for kind in [SketchKind::Sign, SketchKind::Srht, SketchKind::SparseEmbedding, SketchKind::Jlt] {
            let spec = SketchSpec { kind, out_dim: out, in_dim: inn, seed: sd };
            let again = SketchSpec::from_json(&spec.to_json()).unwrap();
            prop_assert!(spec.materialize().unwrap().bit_eq(&again.materialize().unwrap()));
        }
        prop_assert!(SignSketch::new(out, inn, sd).to_dense().bit_eq(&SignSketch::new(out, inn, sd).to_dense()));
        prop_assert!(Srht::new(out, inn, sd).unwrap().to_dense().bit_eq(&Srht::new(out, inn, sd).unwrap().to_dense()));
    }

    #[test]
    fn fwht_is_self_inverse(xs in prop::collection::vec(-1e3f64..1e3, 64)) {
        let mut y = xs.clone();
        fwht(&mut y);
        fwht(&mut y);
        for (a, b) in xs.iter().zip(&y) {
            prop_assert!((a - b / 64.0).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn sparse_embedding_keeps_single_entries(seed in any::<u64>(), j in 0usize..20, x in -1e6f64..1e6) {
        let w = SparseEmbedding::new(7, 20, SketchSeed::new(seed, 0));
        let e = DenseMatrix::from_fn(20, 1, |i, _| if i == j { x } else { 0.0 });
        let y = w.apply_rows(&e);
        prop_assert_eq!(y.frob(), e.frob());
    }

    #[test]
    fn batch_ratio_is_at_least_one(seed in any::<u64>()) {
        let a = gen_lowrank_noise(20, 24, 3, 0.1, seed).unwrap();
        let u = batch_low_rank(&a, &BatchParams::new(2, 0.5, seed)).unwrap().u;
        let resid = (&a - &(&u * &(&u.t() * &a))).frob_sq();
        let tail: f64 = sv(&a).iter().skip(2).map(|s| s * s).sum();
        prop_assert!(resid / tail >= 1.0 - 1e-9);
    }

    #[test]
    fn smoothing_preserves_the_tail(seed in any::<u64>()) {
        let (m, n, k, eps) = (12, 16, 2, 0.5);
        let a = gen_integer_rank(m, n, 8, 4, seed);
        let tail = sv(&a).iter().skip(k).map(|s| s * s).sum::<f64>().sqrt();
        let eta = 0.01 * eps * tail / ((m * n) as f64).sqrt();
        let b = &a + &noise_matrix(m, n, eta, SketchSeed::new(seed, 7));
        let tb = sv(&b).iter().skip(k).map(|s| s * s).sum::<f64>().sqrt();
        prop_assert!(tb <= (1.0 + eps) * tail);
    }

    #[test]
    fn beta_sandwiches_the_residual(x in 1e-20f64..1e20) {
        let b = residual_beta(x);
        prop_assert!(x <= b && b <= 2.0 * x);
    }

    #[test]
    fn column_selection_is_deterministic(seed in any::<u64>()) {
        let g = gaussian(8, 20, &mut rng(seed));
        let (v, e) = right_split(&g, 2);
        let s1 = bss_sampling(&v, &e, 6).unwrap();
        let s2 = bss_sampling(&v, &e, 6).unwrap();
        prop_assert_eq!(&s1.indices, &s2.indices);
        prop_assert!(s1.weights.iter().zip(&s2.weights).all(|(a, b)| a.to_bits() == b.to_bits()));
        let c1 = deterministic_css(&g, 2, 6).unwrap();
        let c2 = deterministic_css(&g, 2, 6).unwrap();
        prop_assert_eq!(c1.indices, c2.indices);
        prop_assert!(c1.residual <= c1.factor * c1.tail * (1.0 + 1e-9));
    }

    #[test]
    fn two_level_probabilities_stay_within_factor_two(seed in any::<u64>(), s in 2usize..5) {
        let a = gaussian(6, 24, &mut rng(seed));
        let v = a.select_cols(&[0, 1]);
        let norms = residual_col_norms(&a, &v);
        let total: f64 = norms.iter().sum();
        let w = 24 / s;
        let blocks: Vec<std::ops::Range<usize>> =
            (0..s).map(|i| i * w..if i + 1 == s { 24 } else { (i + 1) * w }).collect();
        let betas: Vec<f64> = blocks.iter().map(|r| residual_beta(norms[r.clone()].iter().sum())).collect();
        let beta_sum: f64 = betas.iter().sum();
        for (r, beta) in blocks.iter().zip(&betas) {
            let local: f64 = norms[r.clone()].iter().sum();
            for j in r.clone() {
                let p = norms[j] / total;
                let q = if local > 0.0 { beta / beta_sum * norms[j] / local } else { 0.0 };
                prop_assert!(p / 2.0 <= q * (1.0 + 1e-12) && q <= 2.0 * p * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn sparse_kernels_stay_sparse(seed in any::<u64>()) {
        let a = gen_sparse_lowrank(30, 80, 2, 5, 0.05, seed).unwrap();
        let mut ins = Instrument::default();
        let z = sparse_svd_counted(&a, 2, 0.5, SketchSeed::new(seed, 1), &mut ins).unwrap();
        let xi = SketchConstants::default().sparse_embedding_dim(2, 0.5) as u64;
        let (m, n) = (a.rows() as u64, a.cols() as u64);
        prop_assert!(ins.dense_high_water <= a.nnz() as u64 + xi * (m + n) + xi * xi);
        prop_assert_eq!(ins.touched % a.nnz() as u64, 0);
        let z2 = sparse_svd_counted(&a, 2, 0.5, SketchSeed::new(seed, 1), &mut Instrument::default()).unwrap();
        prop_assert!(z.bit_eq(&z2));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn ledger_is_conserved_replayable_and_star_shaped(seed in any::<u64>(), rank in prop::sample::select(vec![2usize, 12])) {
        let a = gen_lowrank_noise(14, 18, rank, 0.0, seed).unwrap();
        let cl = Cluster::scatter_entries(&a, 3, seed).unwrap();
        let p = ArbParams::new(2, 0.5, seed);
        let o1 = distributed_pca_arbitrary(&cl, &p).unwrap();
        let o2 = distributed_pca_arbitrary(&cl, &p).unwrap();
        let sum: u64 = o1.ledger.messages().iter().map(|m| m.words).sum();
        prop_assert_eq!(o1.ledger.total_words(), sum);
        prop_assert_eq!(o1.ledger.transcript_jsonl(), o2.ledger.transcript_jsonl());
        prop_assert!(o1.ledger.messages().iter().all(|m| m.from == SERVER || m.to == SERVER));
        prop_assert!(o1.machines_agree && o1.u.bit_eq(&o2.u));
        let d = o1.dims;
        let rank_words = o1.ledger.phase_totals()["rank-test"];
        prop_assert_eq!(rank_words, (3 * d.c * d.c) as u64);
        prop_assert_eq!(o1.branch == Branch::Smoothed, rank > 4);
    }

    #[test]
    fn css_protocol_invariants(seed in any::<u64>(), fast in any::<bool>()) {
        let (k, phi) = (2, 4);
        let a = gen_sparse_lowrank(16, 48, k, phi, 0.05, seed).unwrap();
        let cl = Cluster::split_columns(&a, 3).unwrap();
        let p = if fast { CssParams::fast(k, 0.9, 0.1, seed) } else { CssParams::new(k, 0.9, seed) };
        let o = distributed_css_pca(&cl, &p).unwrap();
        let ad = a.to_dense();
        for (t, &j) in o.columns.iter().enumerate() {
            prop_assert!(o.c_tilde.to_dense().select_cols(&[t]).bit_eq(&ad.select_cols(&[j])));
        }
        let ch = o.checks.unwrap();
        prop_assert!(ch.residual_c_tilde <= ch.residual_c * (1.0 + 1e-9) + 1e-12);
        prop_assert!(ch.residual_c_tilde <= ch.residual_u * (1.0 + 1e-9) + 1e-12);
        let adaptive = o.ledger.phase_totals().get("adaptive").copied().unwrap_or(0);
        prop_assert!(adaptive <= (p.c2 * (2 * phi + 1)) as u64);
        prop_assert!(o.machines_agree);
        let again = distributed_css_pca(&cl, &p).unwrap();
        prop_assert!(again.u.bit_eq(&o.u) && again.columns == o.columns);
    }

    #[test]
    fn stream_state_is_linear(seed in any::<u64>()) {
        let (m, n) = (8, 10);
        let dims = OnePassDims::new(m, n, 2, 0.5, &SketchConstants::default());
        let mut g = rng(seed);
        let ups: Vec<StreamUpdate> = (0..60)
            .map(|_| StreamUpdate { i: g.gen_range(0..m), j: g.gen_range(0..n), x: g.gen_range(-5.0..5.0) })
            .collect();
        let mut perm = ups.clone();
        for i in (1..perm.len()).rev() {
            perm.swap(i, g.gen_range(0..=i));
        }
        let declared = dims.space_words(m, n, true);
        for mode in [Accumulation::Plain, Accumulation::Exact] {
            let mut a = TurnstileSketchState::new(m, n, dims, seed, true, mode);
            let mut b = a.clone();
            for u in &ups {
                a.update(*u).unwrap();
                prop_assert!(a.space_words() <= declared);
            }
            for u in &perm {
                // Halving is exact, so the parts add back to x bit for bit.
                b.update(StreamUpdate { x: u.x * 0.5, ..*u }).unwrap();
                b.update(StreamUpdate { x: u.x * 0.5, ..*u }).unwrap();
            }
            for (x, y) in [(a.m_mat(), b.m_mat()), (a.l_mat(), b.l_mat()), (a.n_mat(), b.n_mat()), (a.d_mat(), b.d_mat())] {
                let rel = (&x - &y).frob() / x.frob().max(1e-300);
                prop_assert!(rel <= 1e-10);
                if mode == Accumulation::Exact {
                    prop_assert!(x.bit_eq(&y));
                }
            }
        }
    }
}

#[test]
fn larger_sketches_do_not_hurt_on_average() {
    let a = gen_lowrank_noise(30, 40, 2, 0.2, 5).unwrap();
    let tail: f64 = sv(&a).iter().skip(2).map(|s| s * s).sum();
    let avg = |xi: usize| -> f64 {
        (0..200u64)
            .map(|seed| {
                let mut p = BatchParams::new(2, 0.5, seed);
                p.xi1 = Some(xi);
                p.xi2 = Some(xi);
                let u = batch_low_rank(&a, &p).unwrap().u;
                (&a - &(&u * &(&u.t() * &a))).frob_sq() / tail
            })
            .sum::<f64>()
            / 200.0
    };
    let (small, large) = (avg(32), avg(128));
    assert!(large <= small + 0.02, "xi=128 avg {large} vs xi=32 avg {small}");
}

#[test]
fn nalgebra_oracle_agrees_on_tail() {
    let a = gaussian(6, 9, &mut rng(1));
    let m: DMatrix<f64> = a.as_na() * a.as_na().transpose();
    let mut ev: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    let (_, tail) = truncated_svd(&a, 2).unwrap();
    let want: f64 = ev.iter().skip(2).sum();
    assert!((tail - want).abs() <= 1e-9 * want);
}
