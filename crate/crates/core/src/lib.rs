//! Amortized clustering of tabular data.
//!
//! The crate covers the whole pipeline: synthetic task priors ([`prior`]), a
//! small reverse-mode engine ([`autodiff`]), the partition inference network
//! ([`pin`]) and cardinality head ([`cin`]), the training loop ([`train`]),
//! partition metrics and matching losses ([`metrics`]), classical baselines and
//! the evaluation protocol ([`eval`]), plus checkpoint and config I/O.

pub mod autodiff;
pub mod checkpoint;
pub mod cin;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pin;
pub mod prior;
pub mod train;

pub use autodiff::{Graph, Tensor, Var};
pub use error::{Error, Result};
