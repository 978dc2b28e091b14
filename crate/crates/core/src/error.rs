//! Error type shared by every module in the crate.

use thiserror::Error;

/// All failure modes of the library. Variants are grouped by the subsystem
/// that raises them; the CLI maps them onto exit-code categories.
#[derive(Debug, Error)]
pub enum Error {
    // tensor
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFiniteValue { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),

    // layers
    #[error("attention mask excludes every position")]
    AllMasked,
    #[error("empty sequence")]
    EmptySequence,
    #[error("dropout probability {0} outside [0, 1)")]
    InvalidProbability(f64),
    #[error("weight-norm direction has zero norm")]
    ZeroDirection,
    #[error("position {pos} outside learned position table of size {size}")]
    PositionOutOfRange { pos: usize, size: usize },

    // configuration / data
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("batch contains no loss-bearing tokens")]
    EmptyBatch,
    #[error("target id {id} outside vocabulary of size {vocab}")]
    TargetOutOfRange { id: usize, vocab: usize },
    #[error("sentence pair needs {len} padded tokens, exceeding the budget of {budget}")]
    SentenceExceedsBudget { len: usize, budget: usize },

    // optimizer / training
    #[error("freeze selector '{0}' matches no parameter")]
    UnknownSelector(String),
    #[error("missing pre-trained encoder: {0}")]
    MissingPretrainedEncoder(String),
    #[error("column dimension mismatch: {0}")]
    ColumnDimMismatch(String),

    // decoding / evaluation
    #[error("empty source sentence")]
    EmptySource,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("series of length {len} is shorter than the window {window}")]
    SeriesTooShort { len: usize, window: usize },

    // checkpoints / CLI
    #[error("checkpoint incompatible: {0}")]
    CheckpointIncompatible(String),
    #[error("unknown ablation toggle '{0}'")]
    UnknownToggle(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand used by tape ops.
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Error {
        Error::ShapeMismatch { op, detail: detail.into() }
    }
}
