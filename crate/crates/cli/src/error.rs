//! CLI-level errors and their exit-code categories.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Core(#[from] seqlab_core::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    /// Exit-code category: 2 configuration, 3 data/corpus, 4 checkpoint,
    /// 5 numeric instability, 6 io, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use seqlab_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 6,
            CliError::Core(core) => match core {
                E::ConfigInvalid(_) | E::UnknownToggle(_) | E::UnknownSelector(_) => 2,
                E::EmptyBatch
                | E::EmptyCorpus
                | E::EmptySource
                | E::EmptySequence
                | E::SentenceExceedsBudget { .. }
                | E::SeriesTooShort { .. }
                | E::TargetOutOfRange { .. } => 3,
                E::CheckpointIncompatible(_) | E::MissingPretrainedEncoder(_) => 4,
                E::NonFiniteValue { .. } | E::NotScalarLoss(_) => 5,
                _ => 1,
            },
        }
    }
}
