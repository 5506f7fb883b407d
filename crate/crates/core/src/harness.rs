//! Coordinator-model simulator: a server and `s` machines, with every transfer
//! recorded in an append-only word ledger.

use crate::error::{shape, Error, Result};
use crate::exact::{ExactMatrix, ExactSum};
use crate::matrix::{DenseMatrix, SparseColMatrix};
use crate::par::{map_indexed, ExecMode};
use crate::sketch::{mix64, SketchSeed};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Endpoint id of the coordinator; machines are numbered `1..=s`.
pub const SERVER: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub round: u32,
    pub from: usize,
    pub to: usize,
    pub words: u64,
    pub phase: String,
    #[serde(skip)]
    pub digest: u64,
}

/// Seed handed out by the `call`-th seed agreement under master seed `master`.
pub fn agreed_seed(master: u64, call: u64) -> u64 {
    SketchSeed::new(master, 0x5eed).word(call, 0)
}

#[derive(Clone, Debug)]
pub struct CommLedger {
    s: usize,
    master: u64,
    seed_calls: u64,
    round: u32,
    messages: Vec<Message>,
}

impl CommLedger {
    pub fn new(s: usize, master_seed: u64) -> Self {
        Self {
            s,
            master: master_seed,
            seed_calls: 0,
            round: 0,
            messages: Vec::new(),
        }
    }

    pub fn machines(&self) -> usize {
        self.s
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    fn record(&mut self, from: usize, to: usize, words: u64, phase: &str, digest: u64) -> Result<()> {
        if from != SERVER && to != SERVER {
            return Err(Error::Protocol(format!(
                "machine {from} attempted to message machine {to} directly"
            )));
        }
        let m = from.max(to);
        if m > self.s {
            return Err(Error::Protocol(format!("no machine with id {m}")));
        }
        self.messages.push(Message {
            round: self.round,
            from,
            to,
            words,
            phase: phase.to_string(),
            digest,
        });
        Ok(())
    }

    /// One round in which the server sends the same payload to every machine.
    pub fn broadcast(&mut self, phase: &str, words: u64, digest: u64) -> Result<()> {
        self.round += 1;
        for i in 1..=self.s {
            self.record(SERVER, i, words, phase, digest)?;
        }
        Ok(())
    }

    /// One round in which machine `i + 1` sends `words[i]` words to the server.
    pub fn upload(&mut self, phase: &str, words: &[u64], digests: &[u64]) -> Result<()> {
        if words.len() != self.s || digests.len() != self.s {
            return Err(Error::Protocol("upload needs one entry per machine".into()));
        }
        self.round += 1;
        for i in 0..self.s {
            self.record(i + 1, SERVER, words[i], phase, digests[i])?;
        }
        Ok(())
    }

    /// Server sends individual payloads; machines with zero words get no message.
    pub fn scatter(&mut self, phase: &str, words: &[u64], digests: &[u64]) -> Result<()> {
        self.round += 1;
        for i in 0..self.s {
            self.record(SERVER, i + 1, words[i], phase, digests[i])?;
        }
        Ok(())
    }

    /// Fresh shared seed: the server draws it and broadcasts two words to every machine.
    pub fn agree_seed(&mut self, phase: &str) -> Result<u64> {
        let seed = agreed_seed(self.master, self.seed_calls);
        self.seed_calls += 1;
        self.broadcast(phase, 2, seed)?;
        Ok(seed)
    }

    pub fn total_words(&self) -> u64 {
        self.messages.iter().map(|m| m.words).sum()
    }

    pub fn phase_totals(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for m in &self.messages {
            *out.entry(m.phase.clone()).or_insert(0) += m.words;
        }
        out
    }

    pub fn round_totals(&self) -> BTreeMap<u32, u64> {
        let mut out = BTreeMap::new();
        for m in &self.messages {
            *out.entry(m.round).or_insert(0) += m.words;
        }
        out
    }

    /// `(sent, received)` words for each machine.
    pub fn machine_totals(&self) -> Vec<(u64, u64)> {
        let mut out = vec![(0, 0); self.s];
        for m in &self.messages {
            if m.from != SERVER {
                out[m.from - 1].0 += m.words;
            } else {
                out[m.to - 1].1 += m.words;
            }
        }
        out
    }

    pub fn transcript_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            round: u32,
            from: usize,
            to: usize,
            words: u64,
            phase: &'a str,
        }
        let mut s = String::new();
        for m in &self.messages {
            let l = Line {
                round: m.round,
                from: m.from,
                to: m.to,
                words: m.words,
                phase: &m.phase,
            };
            s.push_str(&serde_json::to_string(&l).expect("serializable"));
            s.push('\n');
        }
        s
    }

    /// Digest of the full transcript including payload fingerprints.
    pub fn fingerprint(&self) -> u64 {
        self.messages.iter().fold(0u64, |h, m| {
            let mut x = h ^ mix64(m.round as u64);
            x = mix64(x ^ ((m.from as u64) << 32 | m.to as u64));
            x = mix64(x ^ m.words);
            mix64(x ^ m.digest)
        })
    }
}

pub fn digest_dense(a: &DenseMatrix) -> u64 {
    let mut h = mix64((a.rows() as u64) << 32 | a.cols() as u64);
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            h = mix64(h ^ a[(i, j)].to_bits());
        }
    }
    h
}

pub fn digest_exact(a: &ExactMatrix) -> u64 {
    digest_dense(&a.round())
}

/// Machines upload equally shaped matrices; the server adds them in machine order.
pub fn gather_sum(ledger: &mut CommLedger, phase: &str, parts: &[DenseMatrix]) -> Result<DenseMatrix> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Protocol("nothing to gather".into()))?;
    if parts.iter().any(|p| p.shape() != first.shape()) {
        return Err(Error::Protocol("gathered matrices disagree in shape".into()));
    }
    let w = (first.rows() * first.cols()) as u64;
    let words = vec![w; parts.len()];
    let digests: Vec<u64> = parts.iter().map(digest_dense).collect();
    ledger.upload(phase, &words, &digests)?;
    let mut acc = first.clone();
    for p in &parts[1..] {
        acc = &acc + p;
    }
    Ok(acc)
}

/// Exact variant of [`gather_sum`]: partial sums travel as exact accumulators, so the
/// result does not depend on how the input was split.
pub fn gather_sum_exact(ledger: &mut CommLedger, phase: &str, parts: &[ExactMatrix]) -> Result<ExactMatrix> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Protocol("nothing to gather".into()))?;
    if parts.iter().any(|p| p.shape() != first.shape()) {
        return Err(Error::Protocol("gathered matrices disagree in shape".into()));
    }
    let w = (first.rows() * first.cols()) as u64;
    let words = vec![w; parts.len()];
    let digests: Vec<u64> = parts.iter().map(digest_exact).collect();
    ledger.upload(phase, &words, &digests)?;
    let mut acc = first.clone();
    for p in &parts[1..] {
        acc.merge(p);
    }
    Ok(acc)
}

/// Sparse-column upload cost: `2·nnz + 1` words per column.
pub fn sparse_columns_cost(a: &SparseColMatrix) -> u64 {
    (0..a.cols()).map(|j| a.col_cost(j)).sum()
}

pub fn digest_sparse(a: &SparseColMatrix) -> u64 {
    a.iter_entries().fold(mix64(a.cols() as u64), |h, (i, j, v)| {
        mix64(h ^ mix64(((i as u64) << 32) | j as u64) ^ v.to_bits())
    })
}

/// Contiguous block of columns held by one machine.
#[derive(Clone, Debug)]
pub struct ColumnBlock {
    pub offset: usize,
    pub data: SparseColMatrix,
}

#[derive(Clone, Debug)]
pub enum Partition {
    /// `A = Σ A_i`, every `A_i` of full size.
    Arbitrary(Vec<DenseMatrix>),
    /// `A = [A_1, …, A_s]`.
    Column(Vec<ColumnBlock>),
}

#[derive(Clone, Debug)]
pub struct Cluster {
    pub m: usize,
    pub n: usize,
    pub partition: Partition,
    pub exec: ExecMode,
}

impl Cluster {
    pub fn arbitrary(parts: Vec<DenseMatrix>) -> Result<Self> {
        let Some(first) = parts.first() else {
            return shape("a cluster needs at least one machine");
        };
        let (m, n) = first.shape();
        if parts.iter().any(|p| p.shape() != (m, n)) {
            return shape("arbitrary partition pieces must share one shape");
        }
        for p in &parts {
            p.validate()?;
        }
        Ok(Self {
            m,
            n,
            partition: Partition::Arbitrary(parts),
            exec: ExecMode::default(),
        })
    }

    pub fn columns(blocks: Vec<SparseColMatrix>) -> Result<Self> {
        let Some(first) = blocks.first() else {
            return shape("a cluster needs at least one machine");
        };
        let m = first.rows();
        if blocks.iter().any(|b| b.rows() != m) {
            return shape("column blocks must share a row count");
        }
        let mut offset = 0;
        let mut out = Vec::new();
        for b in blocks {
            let w = b.cols();
            out.push(ColumnBlock { offset, data: b });
            offset += w;
        }
        Ok(Self {
            m,
            n: offset,
            partition: Partition::Column(out),
            exec: ExecMode::default(),
        })
    }

    /// Splits the columns of `a` into `s` contiguous, nearly equal blocks.
    pub fn split_columns(a: &SparseColMatrix, s: usize) -> Result<Self> {
        if s == 0 {
            return shape("need at least one machine");
        }
        let n = a.cols();
        let mut blocks = Vec::new();
        let mut start = 0;
        for i in 0..s {
            let w = n / s + usize::from(i < n % s);
            blocks.push(a.col_range(start, w));
            start += w;
        }
        Self::columns(blocks)
    }

    /// Sends every entry of `a` to one machine chosen by `seed`.
    pub fn scatter_entries(a: &DenseMatrix, s: usize, seed: u64) -> Result<Self> {
        if s == 0 {
            return shape("need at least one machine");
        }
        let sk = SketchSeed::new(seed, 0x5ca7);
        let mut parts = vec![DenseMatrix::zeros(a.rows(), a.cols()); s];
        for i in 0..a.rows() {
            for j in 0..a.cols() {
                let owner = (sk.word(i as u64, j as u64) % s as u64) as usize;
                parts[owner][(i, j)] = a[(i, j)];
            }
        }
        Self::arbitrary(parts)
    }

    pub fn with_exec(mut self, exec: ExecMode) -> Self {
        self.exec = exec;
        self
    }

    pub fn machines(&self) -> usize {
        match &self.partition {
            Partition::Arbitrary(p) => p.len(),
            Partition::Column(b) => b.len(),
        }
    }

    /// The implied global matrix; arbitrary pieces are summed exactly.
    pub fn global_dense(&self) -> DenseMatrix {
        match &self.partition {
            Partition::Arbitrary(parts) => {
                DenseMatrix::from_fn(self.m, self.n, |i, j| {
                    let mut acc = ExactSum::new();
                    for p in parts {
                        acc.add(p[(i, j)]);
                    }
                    acc.value()
                })
            }
            Partition::Column(blocks) => {
                let d: Vec<DenseMatrix> = blocks.iter().map(|b| b.data.to_dense()).collect();
                let refs: Vec<&DenseMatrix> = d.iter().collect();
                DenseMatrix::hcat(&refs).expect("blocks share rows")
            }
        }
    }

    pub fn global_sparse(&self) -> SparseColMatrix {
        match &self.partition {
            Partition::Column(blocks) => {
                let refs: Vec<&SparseColMatrix> = blocks.iter().map(|b| &b.data).collect();
                SparseColMatrix::hcat(&refs).expect("blocks share rows")
            }
            Partition::Arbitrary(_) => SparseColMatrix::from_dense(&self.global_dense()),
        }
    }

    pub fn arbitrary_parts(&self) -> Result<&[DenseMatrix]> {
        match &self.partition {
            Partition::Arbitrary(p) => Ok(p),
            Partition::Column(_) => Err(Error::Input("protocol needs an arbitrary partition".into())),
        }
    }

    pub fn column_blocks(&self) -> Result<&[ColumnBlock]> {
        match &self.partition {
            Partition::Column(b) => Ok(b),
            Partition::Arbitrary(_) => Err(Error::Input("protocol needs a column partition".into())),
        }
    }

    /// Runs `f` once per machine (0-based index) and returns results in machine order.
    pub fn map_machines<T, F>(&self, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        map_indexed(self.exec, self.machines(), f)
    }
}
