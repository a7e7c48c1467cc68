//! Evaluation toolkit for knowledge graph completion.
//!
//! Covers the entity-ranking protocol with micro (per-answer) and macro
//! (per-question) metrics, TREC-style pooling and judgment collection, and
//! meta-evaluation of metrics: Kendall's tau between system rankings,
//! pooling-depth sweeps, subsample stability and discriminative power.

pub mod annotation;
pub mod error;
pub mod kg;
pub mod meta_eval;
pub mod metrics;
pub mod pooling;
pub mod ranking;
pub mod util;

pub use error::{Error, Result};
