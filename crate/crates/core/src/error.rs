use thiserror::Error;

/// Errors raised by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("transcript of length {n} cannot fit a video of {t} frames")]
    Infeasible { n: usize, t: usize },

    #[error("no candidate transcript fits a video of {t} frames")]
    NoFeasibleTranscript { t: usize },

    #[error("class index {class} out of range for {k} classes")]
    UnknownClass { class: usize, k: usize },

    #[error("hyper-node {layer} is empty after clipping")]
    EmptyHyperNode { layer: usize },

    #[error("position {pos} is not a valid edge endpoint for {t} frames")]
    Position { pos: usize, t: usize },

    #[error("path enumeration would produce {count} paths (limit {limit})")]
    TooManyPaths { count: u128, limit: usize },

    #[error("non-finite value at layer {layer}: {what}")]
    NonFinite { layer: usize, what: &'static str },

    #[error("parse error in {file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("oracle check failed: {0}")]
    OracleMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
