use dpca_core::batch::{batch_low_rank, BatchParams};
use dpca_core::css::{bss_sampling, deterministic_css, frob_sampled_sq, residual_beta, right_split, sigma_k_sq};
use dpca_core::dist_arb::{distributed_pca_arbitrary, smoothed_words, low_rank_words, ArbParams, Branch};
use dpca_core::harness::Cluster;
use dpca_core::instances::{gaussian, gen_lowrank_noise};
use dpca_core::matrix::{rank_constrained_affine_solve, truncated_svd, DenseMatrix};
use dpca_core::report::CheckResult;
use dpca_core::sketch::{fwht, SketchSeed};
use dpca_core::streaming::{two_pass_pca, Accumulation, OnePassDims, Stream, StreamUpdate, TurnstileSketchState};
use dpca_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn wrap(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((ok, detail)) => CheckResult::new(name, ok, detail),
        Err(e) => CheckResult::new(name, false, format!("error: {e}")),
    }
}

fn fwht_inverse(seed: u64) -> Result<(bool, String)> {
    let sk = SketchSeed::new(seed, 1);
    let x: Vec<f64> = (0..64).map(|i| sk.unit(i, 0) - 0.5).collect();
    let mut y = x.clone();
    fwht(&mut y);
    fwht(&mut y);
    let err = x.iter().zip(&y).map(|(a, b)| (a - b / 64.0).abs()).fold(0.0, f64::max);
    Ok((err <= 1e-12, format!("max error {err:e}")))
}

fn bss(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = gaussian(20, 40, &mut rng);
    let (v, e) = right_split(&g, 4);
    let s = bss_sampling(&v, &e, 16)?;
    let sig = sigma_k_sq(&v, &s);
    let fro = frob_sampled_sq(&e, &s);
    Ok((sig >= 0.25 && fro <= e.frob_sq() * (1.0 + 1e-12), format!("sigma_k^2 {sig}, ratio {}", fro / e.frob_sq())))
}

fn css_factor(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = gaussian(10, 30, &mut rng);
    let sel = deterministic_css(&g, 2, 8)?;
    let ratio = sel.residual / sel.tail;
    Ok((ratio <= 5.0 + 1e-9, format!("ratio {ratio}")))
}

fn beta_sandwich(seed: u64) -> Result<(bool, String)> {
    let sk = SketchSeed::new(seed, 2);
    for t in 0..1000 {
        let x = (sk.unit(t, 0) * 40.0 - 20.0).exp2();
        let b = residual_beta(x);
        if !(x <= b && b <= 2.0 * x) {
            return Ok((false, format!("residual {x} gave {b}")));
        }
    }
    Ok((residual_beta(0.0) == 0.0, "1000 draws".into()))
}

fn dist_equals_batch(seed: u64) -> Result<(bool, String)> {
    let a = gen_lowrank_noise(24, 30, 3, 0.1, seed)?;
    let cl = Cluster::scatter_entries(&a, 3, seed)?;
    let mut p = ArbParams::new(2, 0.5, seed);
    p.eta = Some(0.0);
    p.rho = Some(0.0);
    let o = distributed_pca_arbitrary(&cl, &p)?;
    let b = batch_low_rank(&a, &BatchParams::new(2, 0.5, o.sketch_seed))?;
    Ok((o.branch == Branch::Smoothed && o.u.bit_eq(&b.u), format!("branch {:?}", o.branch)))
}

fn ledger_formula(seed: u64) -> Result<(bool, String)> {
    let a = gen_lowrank_noise(20, 30, 10, 0.0, seed)?;
    let cl = Cluster::scatter_entries(&a, 2, seed)?;
    let p = ArbParams::new(2, 0.5, seed);
    let o = distributed_pca_arbitrary(&cl, &p)?;
    let expect = match o.branch {
        Branch::Smoothed => smoothed_words(2, 20, 2, &o.dims),
        Branch::LowRank => low_rank_words(2, 20, &o.dims),
    };
    let sum: u64 = o.ledger.phase_totals().values().sum();
    Ok((
        !o.reseeded && o.ledger.total_words() == expect && sum == expect,
        format!("{} words, formula {expect}", o.ledger.total_words()),
    ))
}

fn two_pass(seed: u64) -> Result<(bool, String)> {
    let mut ok = true;
    for rank in [2usize, 12] {
        let a = gen_lowrank_noise(16, 20, rank, 0.0, seed)?;
        let mut p = ArbParams::new(2, 0.5, seed);
        p.eta = Some(1e-8);
        let d = distributed_pca_arbitrary(&Cluster::arbitrary(vec![a.clone()])?, &p)?;
        let t = two_pass_pca(&mut Stream::from_dense(&a), &p)?;
        ok &= d.branch == t.branch && d.u.bit_eq(&t.u);
    }
    Ok((ok, "both branches".into()))
}

fn split_invariance(seed: u64) -> Result<(bool, String)> {
    let sk = SketchSeed::new(seed, 3);
    let (m, n) = (12, 16);
    let dims = OnePassDims::new(m, n, 2, 0.5, &Default::default());
    let ups: Vec<StreamUpdate> = (0..200)
        .map(|t| StreamUpdate {
            i: (sk.word(t, 0) % m as u64) as usize,
            j: (sk.word(t, 1) % n as u64) as usize,
            x: sk.unit(t as usize, 2) - 0.5,
        })
        .collect();
    let mut whole = TurnstileSketchState::new(m, n, dims, seed, true, Accumulation::Exact);
    let mut split = whole.clone();
    for u in &ups {
        whole.update(*u)?;
        split.update(StreamUpdate { x: u.x * 0.5, ..*u })?;
        split.update(StreamUpdate { x: u.x * 0.5, ..*u })?;
    }
    let same = whole.m_mat().bit_eq(&split.m_mat())
        && whole.l_mat().bit_eq(&split.l_mat())
        && whole.n_mat().bit_eq(&split.n_mat())
        && whole.d_mat().bit_eq(&split.d_mat());
    Ok((same, "200 updates halved".into()))
}

fn solver_closed_form(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = gaussian(5, 5, &mut rng);
    let id = DenseMatrix::identity(5);
    let x = rank_constrained_affine_solve(&m, &id, &id, 2)?;
    let (f, _) = truncated_svd(&m, 2)?;
    let err = x.max_abs_diff(&f.reconstruct());
    Ok((err <= 1e-8, format!("max deviation {err:e}")))
}

/// Runs every quick invariant once.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    vec![
        wrap("fwht-self-inverse", || fwht_inverse(seed)),
        wrap("bss-postconditions", || bss(seed)),
        wrap("css-factor", || css_factor(seed)),
        wrap("residual-beta-sandwich", || beta_sandwich(seed)),
        wrap("dist-equals-batch", || dist_equals_batch(seed)),
        wrap("ledger-closed-form", || ledger_formula(seed)),
        wrap("two-pass-equals-dist", || two_pass(seed)),
        wrap("stream-split-invariance", || split_invariance(seed)),
        wrap("solver-closed-form", || solver_closed_form(seed)),
    ]
}
