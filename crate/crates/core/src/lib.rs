//! Sketch-based principal subspace estimation and column subset selection for
//! matrices spread over several machines or arriving as turnstile streams.
//!
//! Distributed runs are simulated in one process: every protocol talks through a
//! [`harness::CommLedger`] that counts the words each message carries.

pub mod batch;
pub mod css;
pub mod css_fast;
pub mod dist_arb;
pub mod dist_css;
pub mod error;
pub mod exact;
pub mod harness;
pub mod instances;
pub mod matrix;
pub mod par;
pub mod report;
pub mod sketch;
pub mod streaming;

pub use error::{Error, Result};
pub use matrix::{DenseMatrix, SparseColMatrix};
