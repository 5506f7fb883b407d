//! Run reports and seeded trial fan-out.

use crate::harness::CommLedger;
use crate::matrix::{proj_residual_sq, tail_sq, DenseMatrix};
use crate::par::{map_indexed, ExecMode};
use crate::sketch::{mix64, SignSketch, SketchSeed};
use serde::Serialize;
use serde_json::Value;
use std::collections::BTreeMap;

/// Largest `m·n` for which the exact error ratio is computed.
pub const MATERIALIZE_LIMIT: usize = 10_000_000;

/// Seed of trial `t` under master seed `seed`.
pub fn trial_seed(seed: u64, t: usize) -> u64 {
    if t == 0 {
        seed
    } else {
        mix64(seed ^ mix64(t as u64))
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Ratio {
    pub value: f64,
    /// Set when the ratio came from JLT-compressed residuals.
    pub estimated: bool,
}

/// `‖A − U Uᵀ A‖² / ‖A − A_k‖²`, exact for materializable inputs.
pub fn error_ratio(a: &DenseMatrix, u: &DenseMatrix, k: usize, seed: u64) -> Ratio {
    if a.rows() * a.cols() <= MATERIALIZE_LIMIT {
        return Ratio {
            value: proj_residual_sq(a, u) / tail_sq(a, k),
            estimated: false,
        };
    }
    let g = SignSketch::jlt(a.rows(), a.cols(), 1.0, SketchSeed::new(seed, 0x7e57));
    let at = g.apply(&a.t()).t();
    Ratio {
        value: proj_residual_sq(&at, u) / tail_sq(&at, k),
        estimated: true,
    }
}

/// Ratio for an explicit approximation `Â`.
pub fn approx_ratio(a: &DenseMatrix, approx: &DenseMatrix, k: usize) -> f64 {
    (a - approx).frob_sq() / tail_sq(a, k)
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct LedgerSummary {
    pub total: u64,
    pub phases: BTreeMap<String, u64>,
    pub rounds: usize,
}

impl LedgerSummary {
    pub fn of(l: &CommLedger) -> Self {
        Self {
            total: l.total_words(),
            phases: l.phase_totals(),
            rounds: l.round_totals().len(),
        }
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Outcome of one trial.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct TrialRecord {
    pub seed: u64,
    pub ratio: Option<Ratio>,
    pub ledger: Option<LedgerSummary>,
    pub space_words: Option<u64>,
    pub flags: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Aggregate {
    pub trials: usize,
    pub ratio_median: Option<f64>,
    pub ratio_min: Option<f64>,
    pub ratio_max: Option<f64>,
    pub ledger_total_max: Option<u64>,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct RunReport {
    pub algorithm: String,
    pub params: Value,
    pub m: usize,
    pub n: usize,
    pub seed: u64,
    /// First trial's record; trials are sorted by seed.
    pub ratio: Option<Ratio>,
    pub ledger: Option<LedgerSummary>,
    pub space_words: Option<u64>,
    pub flags: BTreeMap<String, Value>,
    pub trials: Vec<TrialRecord>,
    pub aggregate: Aggregate,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checks: Option<Vec<CheckResult>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let h = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[h] } else { 0.5 * (v[h - 1] + v[h]) })
}

pub fn aggregate(trials: &[TrialRecord]) -> Aggregate {
    let ratios: Vec<f64> = trials.iter().filter_map(|t| t.ratio.as_ref().map(|r| r.value)).collect();
    Aggregate {
        trials: trials.len(),
        ratio_median: median(&ratios),
        ratio_min: ratios.iter().copied().reduce(f64::min),
        ratio_max: ratios.iter().copied().reduce(f64::max),
        ledger_total_max: trials.iter().filter_map(|t| t.ledger.as_ref().map(|l| l.total)).max(),
    }
}

/// Runs `f` for `count` derived seeds and returns the records sorted by seed.
pub fn run_trials<E, F>(seed: u64, count: usize, exec: ExecMode, f: F) -> Result<Vec<TrialRecord>, E>
where
    E: Send,
    F: Fn(u64) -> Result<TrialRecord, E> + Sync + Send,
{
    let mut out: Vec<TrialRecord> = map_indexed(exec, count.max(1), |t| f(trial_seed(seed, t)))
        .into_iter()
        .collect::<Result<_, E>>()?;
    out.sort_by_key(|r| r.seed);
    Ok(out)
}

impl RunReport {
    pub fn new(algorithm: &str, params: Value, m: usize, n: usize, seed: u64, trials: Vec<TrialRecord>) -> Self {
        let first = trials.iter().find(|t| t.seed == seed).or(trials.first()).cloned();
        Self {
            algorithm: algorithm.to_string(),
            params,
            m,
            n,
            seed,
            ratio: first.as_ref().and_then(|t| t.ratio.clone()),
            ledger: first.as_ref().and_then(|t| t.ledger.clone()),
            space_words: first.as_ref().and_then(|t| t.space_words),
            flags: first.map(|t| t.flags).unwrap_or_default(),
            aggregate: aggregate(&trials),
            trials,
            checks: None,
            wall_ms: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Invariants every report must satisfy.
    pub fn structural_checks(&self) -> Vec<CheckResult> {
        let mut out = Vec::new();
        for t in &self.trials {
            if let Some(r) = &t.ratio {
                out.push(CheckResult::new(
                    "ratio-at-least-one",
                    r.estimated || r.value >= 1.0 - 1e-9,
                    format!("seed {}: {}", t.seed, r.value),
                ));
            }
            if let Some(l) = &t.ledger {
                let sum: u64 = l.phases.values().sum();
                out.push(CheckResult::new(
                    "ledger-phases-sum",
                    sum == l.total,
                    format!("seed {}: {sum} vs {}", t.seed, l.total),
                ));
            }
        }
        out
    }
}
