use thiserror::Error;

/// Errors raised by model construction, forward passes and the surrounding
/// tooling. The CLI maps these onto its stable exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor had the wrong shape for an operation.
    #[error("dimension error in {op}: {detail}")]
    Dim { op: &'static str, detail: String },

    /// A caller violated an operation's contract (bad index, missing input).
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// Invalid configuration (bad key, bad value, inconsistent scales).
    #[error("config error: {0}")]
    Config(String),

    /// Training produced a non-finite loss term.
    #[error("non-finite loss in term `{term}` at step {step}")]
    NonFinite { term: String, step: usize },

    /// Checkpoint file is corrupt or from an unknown format version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {detail}")]
    Image { path: String, detail: String },
}

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dim {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
