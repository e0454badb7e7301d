//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("token id {id} out of vocabulary (size {vocab})")]
    TokenOutOfVocab { id: usize, vocab: usize },

    #[error("sequence length {len} exceeds context length {context}")]
    SequenceTooLong { len: usize, context: usize },

    #[error("word {0:?} cannot be tokenized (non-lowercase-ascii characters)")]
    UnencodableWord(String),

    #[error("attack sample has no keyword positions (N_T = 0) for target {0:?}")]
    EmptyKeywordPositions(String),

    #[error("target loss is already zero; the attack succeeded at the loss level")]
    AttackAlreadySucceeded,

    #[error("every candidate destabilized the model; iteration failed")]
    AllCandidatesDestabilized,

    #[error("no flip candidate available: {0}")]
    NoCandidate(String),

    #[error("auxiliary baseline invalid: {0}")]
    AuxBaseline(String),

    #[error("keyword anchor not locatable: {0}")]
    AnchorNotFound(String),

    #[error("training gate failed: {0}")]
    TrainingGate(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("corpus format error: {0}")]
    CorpusFormat(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("flip plan references weights outside the layout: {0}")]
    PlanOutOfLayout(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
