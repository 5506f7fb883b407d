use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(name = "dpca", version, about = "Distributed and streaming low-rank approximation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Two-sided sketch on one machine.
    Batch(RunArgs),
    /// Arbitrary-partition protocol.
    DistArb(RunArgs),
    /// Column-partition selection protocol with exact kernels.
    DistCss(RunArgs),
    /// Column-partition selection protocol with sparse kernels.
    DistCssFast(RunArgs),
    /// One-pass streaming basis.
    #[command(name = "stream-1p")]
    Stream1p(RunArgs),
    /// One-pass streaming factorization.
    #[command(name = "stream-1p-fact")]
    Stream1pFact(RunArgs),
    /// Two-pass streaming basis.
    #[command(name = "stream-2p")]
    Stream2p(RunArgs),
    /// Write a generated instance to stdout or --out.
    Gen(GenArgs),
    /// Run the built-in invariant suite.
    Check(CheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PartitionKind {
    Arbitrary,
    Column,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// MatrixMarket file or turnstile stream; `-` reads stdin.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(short = 'k', long = "k")]
    pub k: usize,
    #[arg(long, default_value_t = 0.5)]
    pub eps: f64,
    #[arg(long, default_value_t = 0.01)]
    pub delta: f64,
    #[arg(long = "machines", default_value_t = 1)]
    pub machines: usize,
    #[arg(long, value_enum)]
    pub partition: Option<PartitionKind>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub trials: usize,
    /// Noise magnitude for the smoothed branch; 0 disables it.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Rounding grid for transmitted factors; 0 disables it.
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long = "const-dense-jl")]
    pub const_dense_jl: Option<f64>,
    #[arg(long = "const-regression")]
    pub const_regression: Option<f64>,
    #[arg(long = "const-srht-affine")]
    pub const_srht_affine: Option<f64>,
    #[arg(long = "const-sparse-embedding")]
    pub const_sparse_embedding: Option<f64>,
    #[arg(long = "json-out")]
    pub json_out: Option<PathBuf>,
    /// Re-run runtime invariants and attach pass/fail results.
    #[arg(long)]
    pub check: bool,
    /// Include wall-clock time (makes output non-reproducible).
    #[arg(long)]
    pub timings: bool,
    /// Run trials one after another.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GenKind {
    DenseHard,
    CssHard,
    Lowrank,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GenFormat {
    Mtx,
    Stream,
}

#[derive(Args, Debug, Clone)]
pub struct GenArgs {
    #[arg(value_enum)]
    pub kind: GenKind,
    #[arg(short = 'k', long = "k", default_value_t = 1)]
    pub k: usize,
    #[arg(long, default_value_t = 6)]
    pub phi: usize,
    #[arg(long, default_value_t = 64)]
    pub m: usize,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 5)]
    pub rank: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long = "machines", default_value_t = 3)]
    pub machines: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = GenFormat::Mtx)]
    pub format: GenFormat,
    /// Output path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "json-out")]
    pub json_out: Option<PathBuf>,
}
