use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("duplicate triple in {split} split at line {line}: {triple}")]
    DuplicateTriple {
        split: &'static str,
        line: usize,
        triple: String,
    },

    #[error("triple {triple} appears in both {first} and {second} splits")]
    SplitOverlap {
        triple: String,
        first: &'static str,
        second: &'static str,
    },

    #[error("{0} is empty")]
    Empty(String),

    #[error("relation {0} has zero probability in the reference distribution")]
    ZeroReference(String),

    #[error("unknown question id {0}")]
    UnknownQuestion(String),

    #[error("unknown entity {0}")]
    UnknownEntity(String),

    #[error("duplicate entry for ({qid}, {entity})")]
    DuplicatePair { qid: String, entity: String },

    #[error("target {entity} ranked beyond the truncated depth {depth} for {qid}")]
    RankBeyondDepth {
        qid: String,
        entity: String,
        depth: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{count} answers have no resolvable filtered rank (first: {examples})")]
    Unresolvable { count: usize, examples: String },

    #[error("run {tag} has no ranked list for question {qid}")]
    MissingList { tag: String, qid: String },

    #[error("weights do not match the evaluated relations: {0}")]
    WeightMismatch(String),

    #[error("metric {0} is not available")]
    MissingMetric(String),

    #[error("invalid metric identifier {0:?}")]
    BadMetric(String),

    #[error("invalid template for {relation}: {reason}")]
    BadTemplate { relation: String, reason: String },

    #[error("{0} pool entries are still pending judgment")]
    PendingEntries(usize),

    #[error("depth {depth} outside the pool range 0..={max}")]
    DepthOutOfRange { depth: u32, max: u32 },

    #[error("unknown annotator {0}")]
    UnknownAnnotator(String),

    #[error("unknown task {0}")]
    UnknownTask(u32),

    #[error("judgment rejected: {0}")]
    Rejected(String),

    #[error("{0} tasks are unresolved")]
    Unresolved(usize),

    #[error("no task has two primary judgments yet")]
    NoDoubleJudgments,

    #[error("mismatched system sets: {0}")]
    KeyMismatch(String),

    #[error("need at least {needed} {what}, got {got}")]
    TooFew {
        what: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("Kendall's tau is undefined when one ranking is entirely tied")]
    UndefinedTau,

    #[error("per-unit vectors are misaligned: {0}")]
    Misaligned(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, line: usize, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            line,
            reason: reason.into(),
        }
    }
}
