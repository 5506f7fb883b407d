use crate::args::{Command, GenArgs, GenFormat, GenKind, PartitionKind, RunArgs};
use crate::checks;
use dpca_core::batch::{batch_low_rank, BatchParams};
use dpca_core::dist_arb::{distributed_pca_arbitrary, ArbParams};
use dpca_core::dist_css::{distributed_css_pca, CssParams};
use dpca_core::harness::Cluster;
use dpca_core::instances::{gen_css_hard, gen_dense_hard, gen_lowrank_noise, DenseHardSpec};
use dpca_core::matrix::mm::{read_matrix_market, write_dense, write_sparse, MmMatrix};
use dpca_core::par::ExecMode;
use dpca_core::report::{approx_ratio, error_ratio, run_trials, CheckResult, LedgerSummary, RunReport, TrialRecord};
use dpca_core::sketch::SketchConstants;
use dpca_core::streaming::{one_pass_factorization, one_pass_pca, two_pass_pca, Stream, StreamParams};
use dpca_core::{DenseMatrix, Error, Result, SparseColMatrix};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};
use std::path::Path;
use std::time::Instant;

enum Loaded {
    Matrix(MmMatrix),
    Stream(Stream),
}

fn read_source(path: &Path) -> Result<String> {
    let mut text = String::new();
    if path.as_os_str() == "-" {
        std::io::stdin().read_to_string(&mut text)?;
    } else {
        std::fs::File::open(path)?.read_to_string(&mut text)?;
    }
    Ok(text)
}

fn load(path: &Path) -> Result<Loaded> {
    let text = read_source(path)?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    if first.starts_with("%%MatrixMarket") {
        Ok(Loaded::Matrix(read_matrix_market(Cursor::new(text))?))
    } else {
        Ok(Loaded::Stream(Stream::read(Cursor::new(text))?))
    }
}

fn load_dense(path: &Path) -> Result<DenseMatrix> {
    Ok(match load(path)? {
        Loaded::Matrix(m) => m.to_dense(),
        Loaded::Stream(s) => s.materialize(),
    })
}

fn load_sparse(path: &Path) -> Result<SparseColMatrix> {
    Ok(match load(path)? {
        Loaded::Matrix(m) => m.to_sparse(),
        Loaded::Stream(s) => SparseColMatrix::from_dense(&s.materialize()),
    })
}

fn load_stream(path: &Path) -> Result<Stream> {
    Ok(match load(path)? {
        Loaded::Matrix(m) => Stream::from_dense(&m.to_dense()),
        Loaded::Stream(s) => s,
    })
}

fn constants(a: &RunArgs) -> SketchConstants {
    let mut c = SketchConstants::default();
    if let Some(v) = a.const_dense_jl {
        c.dense_jl = v;
    }
    if let Some(v) = a.const_regression {
        c.regression = v;
    }
    if let Some(v) = a.const_srht_affine {
        c.srht_affine = v;
    }
    if let Some(v) = a.const_sparse_embedding {
        c.sparse_embedding = v;
    }
    c
}

fn exec(a: &RunArgs) -> ExecMode {
    if a.sequential {
        ExecMode::Sequential
    } else {
        ExecMode::Parallel
    }
}

fn record(seed: u64) -> TrialRecord {
    TrialRecord {
        seed,
        ratio: None,
        ledger: None,
        space_words: None,
        flags: BTreeMap::new(),
    }
}

fn orthonormality(u: &DenseMatrix) -> f64 {
    (&u.t() * u).max_abs_diff(&DenseMatrix::identity(u.cols()))
}

fn arb_params(a: &RunArgs, seed: u64) -> ArbParams {
    let mut p = ArbParams::new(a.k, a.eps, seed);
    p.eta = a.eta;
    p.rho = a.rho;
    p.delta = a.delta;
    p.constants = constants(a);
    p
}

fn arbitrary_cluster(a: &RunArgs, mat: &DenseMatrix, seed: u64) -> Result<Cluster> {
    let s = a.machines.max(1);
    match a.partition.unwrap_or(PartitionKind::Arbitrary) {
        PartitionKind::Arbitrary => Cluster::scatter_entries(mat, s, seed),
        PartitionKind::Column => {
            let split = Cluster::split_columns(&SparseColMatrix::from_dense(mat), s)?;
            let parts = split
                .column_blocks()?
                .iter()
                .map(|b| {
                    let mut full = DenseMatrix::zeros(mat.rows(), mat.cols());
                    for (i, j, x) in b.data.iter_entries() {
                        full[(i, b.offset + j)] = x;
                    }
                    full
                })
                .collect();
            Cluster::arbitrary(parts)
        }
    }
}

fn run_command(name: &str, a: &RunArgs) -> Result<RunReport> {
    let start = Instant::now();
    let ex = exec(a);
    let (m, n, trials, params): (usize, usize, Vec<TrialRecord>, Value) = match name {
        "batch" => {
            let mat = load_dense(&a.input)?;
            let trials = run_trials(a.seed, a.trials, ex, |seed| {
                let mut p = BatchParams::new(a.k, a.eps, seed);
                p.constants = constants(a);
                let r = batch_low_rank(&mat, &p)?;
                let mut t = record(seed);
                t.ratio = Some(error_ratio(&mat, &r.u, a.k, seed));
                t.flags.insert("rank_deficient".into(), json!(r.rank_deficient));
                t.flags.insert("orthonormality_gap".into(), json!(orthonormality(&r.u)));
                t.flags.insert("xi".into(), json!([r.xi1, r.xi2]));
                Ok::<_, Error>(t)
            })?;
            let p = BatchParams::new(a.k, a.eps, a.seed);
            (mat.rows(), mat.cols(), trials, json!({"k": a.k, "eps": a.eps, "dims": p.dims()}))
        }
        "dist-arb" => {
            let mat = load_dense(&a.input)?;
            let trials = run_trials(a.seed, a.trials, ex, |seed| {
                let cl = arbitrary_cluster(a, &mat, seed)?;
                let o = distributed_pca_arbitrary(&cl, &arb_params(a, seed))?;
                let mut t = record(seed);
                t.ratio = Some(error_ratio(&mat, &o.u, a.k, seed));
                t.ledger = Some(LedgerSummary::of(&o.ledger));
                t.flags.insert("branch".into(), json!(o.branch));
                t.flags.insert("rank_estimate".into(), json!(o.rank_estimate));
                t.flags.insert("rank_deficient".into(), json!(o.rank_deficient));
                t.flags.insert("reseeded".into(), json!(o.reseeded));
                t.flags.insert("machines_agree".into(), json!(o.machines_agree));
                t.flags.insert("eta".into(), json!(o.eta));
                t.flags.insert("orthonormality_gap".into(), json!(orthonormality(&o.u)));
                Ok::<_, Error>(t)
            })?;
            let d = arb_params(a, a.seed).dims(mat.rows(), mat.cols());
            (
                mat.rows(),
                mat.cols(),
                trials,
                json!({"k": a.k, "eps": a.eps, "machines": a.machines, "dims": d}),
            )
        }
        "dist-css" | "dist-css-fast" => {
            if a.partition == Some(PartitionKind::Arbitrary) {
                return Err(Error::Input("column selection needs --partition column".into()));
            }
            let sp = load_sparse(&a.input)?;
            let dense = sp.to_dense();
            let fast = name == "dist-css-fast";
            let trials = run_trials(a.seed, a.trials, ex, |seed| {
                let cl = Cluster::split_columns(&sp, a.machines.max(1))?;
                let p = if fast {
                    CssParams::fast(a.k, a.eps, a.delta, seed)
                } else {
                    CssParams::new(a.k, a.eps, seed)
                };
                let o = distributed_css_pca(&cl, &p)?;
                let mut t = record(seed);
                t.ratio = Some(error_ratio(&dense, &o.u, a.k, seed));
                t.ledger = Some(LedgerSummary::of(&o.ledger));
                t.flags.insert("columns".into(), json!(o.columns.len()));
                t.flags.insert("adaptive_skipped".into(), json!(o.adaptive_skipped));
                t.flags.insert("machines_agree".into(), json!(o.machines_agree));
                if let Some(c) = o.checks {
                    t.flags.insert("c_tilde_ratio".into(), json!(c.residual_c_tilde / c.tail));
                    t.flags.insert("c_ratio".into(), json!(c.residual_c / c.tail));
                }
                t.flags.insert("orthonormality_gap".into(), json!(orthonormality(&o.u)));
                Ok::<_, Error>(t)
            })?;
            let p = CssParams::new(a.k, a.eps, a.seed);
            (
                sp.rows(),
                sp.cols(),
                trials,
                json!({"k": a.k, "eps": a.eps, "machines": a.machines, "c1": p.c1, "c2": p.c2, "fast": fast}),
            )
        }
        "stream-1p" | "stream-1p-fact" => {
            let stream = load_stream(&a.input)?;
            let mat = stream.materialize();
            let fact = name == "stream-1p-fact";
            let trials = run_trials(a.seed, a.trials, ex, |seed| {
                let mut p = StreamParams::new(a.k, a.eps, seed);
                p.constants = constants(a);
                let mut src = stream.clone();
                let mut t = record(seed);
                if fact {
                    let f = one_pass_factorization(&mut src, &p)?;
                    t.ratio = Some(dpca_core::report::Ratio {
                        value: approx_ratio(&mat, &f.materialize(), a.k),
                        estimated: false,
                    });
                    t.space_words = Some(f.space_words);
                } else {
                    let o = one_pass_pca(&mut src, &p)?;
                    t.ratio = Some(error_ratio(&mat, &o.u, a.k, seed));
                    t.space_words = Some(o.space_words);
                    t.flags.insert("orthonormality_gap".into(), json!(orthonormality(&o.u)));
                }
                Ok::<_, Error>(t)
            })?;
            let d = StreamParams::new(a.k, a.eps, a.seed).dims(stream.m, stream.n);
            (
                stream.m,
                stream.n,
                trials,
                json!({"k": a.k, "eps": a.eps, "updates": stream.updates.len(), "dims": d}),
            )
        }
        "stream-2p" => {
            let stream = load_stream(&a.input)?;
            let mat = stream.materialize();
            let trials = run_trials(a.seed, a.trials, ex, |seed| {
                let mut src = stream.clone();
                let o = two_pass_pca(&mut src, &arb_params(a, seed))?;
                let mut t = record(seed);
                t.ratio = Some(error_ratio(&mat, &o.u, a.k, seed));
                t.space_words = Some(o.space_words);
                t.flags.insert("branch".into(), json!(o.branch));
                t.flags.insert("rank_estimate".into(), json!(o.rank_estimate));
                t.flags.insert("eta".into(), json!(o.eta));
                t.flags.insert("orthonormality_gap".into(), json!(orthonormality(&o.u)));
                Ok::<_, Error>(t)
            })?;
            (
                stream.m,
                stream.n,
                trials,
                json!({"k": a.k, "eps": a.eps, "updates": stream.updates.len()}),
            )
        }
        other => return Err(Error::Input(format!("unknown algorithm {other}"))),
    };
    let mut report = RunReport::new(name, params, m, n, a.seed, trials);
    if a.check {
        let mut c = report.structural_checks();
        for t in &report.trials {
            if let Some(g) = t.flags.get("orthonormality_gap").and_then(Value::as_f64) {
                c.push(CheckResult::new(
                    "u-orthonormal",
                    g <= 1e-8,
                    format!("seed {}: {g:e}", t.seed),
                ));
            }
        }
        report.checks = Some(c);
    }
    if a.timings {
        report.wall_ms = Some(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(report)
}

fn emit(text: &str, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
        }
    }
    Ok(())
}

fn generate(g: &GenArgs) -> Result<String> {
    let mut buf = Vec::new();
    match g.kind {
        GenKind::CssHard => write_sparse(&mut buf, &gen_css_hard(g.k, g.phi))?,
        GenKind::DenseHard => {
            let h = gen_dense_hard(
                DenseHardSpec {
                    s: g.machines,
                    m: g.m,
                    k: g.k,
                    n: g.n,
                },
                g.seed,
            )?;
            write_sparse(&mut buf, &h.cluster.global_sparse())?;
        }
        GenKind::Lowrank => {
            let a = gen_lowrank_noise(g.m, g.n, g.rank, g.noise, g.seed)?;
            match g.format {
                GenFormat::Mtx => write_dense(&mut buf, &a)?,
                GenFormat::Stream => Stream::from_dense(&a).write(&mut buf)?,
            }
            return Ok(String::from_utf8(buf).expect("ascii output"));
        }
    }
    let text = String::from_utf8(buf).expect("ascii output");
    if g.format == GenFormat::Stream {
        let m = read_matrix_market(Cursor::new(&text))?;
        let mut out = Vec::new();
        Stream::from_dense(&m.to_dense()).write(&mut out)?;
        return Ok(String::from_utf8(out).expect("ascii output"));
    }
    Ok(text)
}

pub fn dispatch(cmd: Command) -> Result<()> {
    let (name, a) = match cmd {
        Command::Gen(g) => return emit(&generate(&g)?, g.out.as_deref()),
        Command::Check(c) => {
            let results = checks::run_all(c.seed);
            let failed = results.iter().filter(|r| !r.passed).count();
            let text = serde_json::to_string_pretty(&json!({
                "checks": results,
                "failed": failed,
            }))
            .expect("serializes")
                + "\n";
            emit(&text, c.json_out.as_deref())?;
            if failed > 0 {
                return Err(Error::Internal(format!("{failed} invariant checks failed")));
            }
            return Ok(());
        }
        Command::Batch(a) => ("batch", a),
        Command::DistArb(a) => ("dist-arb", a),
        Command::DistCss(a) => ("dist-css", a),
        Command::DistCssFast(a) => ("dist-css-fast", a),
        Command::Stream1p(a) => ("stream-1p", a),
        Command::Stream1pFact(a) => ("stream-1p-fact", a),
        Command::Stream2p(a) => ("stream-2p", a),
    };
    let report = run_command(name, &a)?;
    emit(&(report.to_json() + "\n"), a.json_out.as_deref())
}
