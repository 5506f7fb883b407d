//! Execution mode for trial and per-machine fan-out.

use serde::{Deserialize, Serialize};

/// How independent work items are scheduled. `Parallel` uses the rayon pool when the
/// `parallel` feature is enabled and silently runs sequentially otherwise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    Sequential,
    #[default]
    Parallel,
}

impl ExecMode {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecMode::Parallel
    }
}

/// Evaluates `f(0..n)` and returns the results in index order regardless of mode.
pub fn map_indexed<T, F>(mode: ExecMode, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = mode;
    (0..n).map(f).collect()
}
