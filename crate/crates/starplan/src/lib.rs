//! Desk-scale laboratory for latent planning in small transformers.
//!
//! The crate generates star-graph path-finding datasets, trains a GPT-2
//! style transformer from scratch under latent, chain-of-thought, and
//! internalized-CoT supervision, and measures whether anything beyond
//! random guessing was learned: normalized skill scores, exact binomial
//! significance thresholds, attention backtracking probes, an error
//! taxonomy, and a progressive depth-ceiling search.
//!
//! Start with the runnable programs in `examples/`; the `starplan` binary
//! wraps the same library surface behind subcommands.

pub mod encoding;
pub mod error;
pub mod evalstats;
pub mod experiment;
pub mod model;
pub mod oracle;
pub mod probe;
pub mod promptgen;
pub mod report;
pub mod rng;
pub mod stargraph;
pub mod taxonomy;
pub mod training;

pub use error::{Error, Result};
