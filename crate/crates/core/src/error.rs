use thiserror::Error;

/// Errors produced by this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch}: loss {loss}, rate term {rate_term}, distance term {distance_term}"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss: f64,
        rate_term: f64,
        distance_term: f64,
    },

    #[error("provenance mismatch: {0}")]
    Provenance(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable class name, used for CLI exit diagnostics.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Argument(_) => "argument",
            Error::Dimension(_) => "dimension",
            Error::Degenerate(_) => "degenerate",
            Error::Corrupt(_) => "corrupt-file",
            Error::ArchMismatch(_) => "arch-mismatch",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::Provenance(_) => "provenance",
            Error::MissingInput(_) => "missing-input",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
