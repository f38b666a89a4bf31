//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid graph dimensions: k={k}, m={m} (both must be >= 2)")]
    InvalidDimensions { k: usize, m: usize },
    #[error("id pool of size {pool} too small for {needed} nodes")]
    PoolTooSmall { pool: usize, needed: usize },
    #[error("node {0} is not part of the graph")]
    UnknownNode(u32),
    #[error("node {0} is not a leaf target")]
    TargetNotLeaf(u32),
    #[error("dataset generation exhausted after {retries} retries for one sample")]
    GenerationExhausted { retries: usize },
    #[error("icot stage {stage} out of range for branch length {m}")]
    StageOutOfRange { stage: usize, m: usize },
    #[error("token {0} outside vocabulary of size {1}")]
    TokenOutOfVocabulary(u32, usize),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("loss mask selects no positions")]
    EmptyLossMask,
    #[error("training loss became non-finite at update {update}")]
    Divergence { update: usize },
    #[error("icot stage schedule exhausted before reaching the final stage")]
    ScheduleExhausted,
    #[error("depth-ceiling search budget exceeded; highest passing m so far: {partial:?}")]
    BudgetExceeded { partial: Option<usize> },
    #[error("token layout does not match the instance: {0}")]
    LayoutMismatch(String),
    #[error("instance has zero attention mass on edge tokens")]
    ZeroEdgeAttention,
    #[error("few-shot demonstration collides with the scored instance")]
    DemoOverlap,
    #[error("response references unknown instance id {0}")]
    UnknownInstance(String),
    #[error("graph is disconnected")]
    DisconnectedGraph,
    #[error("config error: {0}")]
    Config(String),
    #[error("batch mixes sequence lengths or modes")]
    RaggedBatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
