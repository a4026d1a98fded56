//! Error types shared across the simulator.

use thiserror::Error;

/// Library-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration field has an invalid value. Carries the field path so
    /// the CLI can point at the offending line.
    #[error("invalid config: {field}: {reason}")]
    Config { field: String, reason: String },

    /// A caller violated an operation contract (shape mismatch, empty batch,
    /// incompatible models, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value escaped a numeric operation.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// The Dirichlet partitioner could not satisfy the minimum-samples
    /// constraint within the retry budget.
    #[error("partition infeasible: {0}")]
    PartitionInfeasible(String),

    /// Pearson correlation is undefined (zero variance in an input).
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    /// A federated round failed; wraps the underlying error with the round.
    #[error("round {round} failed: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Attach round context to an error bubbling out of the FL loop.
    pub fn in_round(self, round: usize) -> Self {
        Error::Round {
            round,
            source: Box::new(self),
        }
    }
}
