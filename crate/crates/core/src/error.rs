use std::path::PathBuf;

/// Errors surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A NaN or infinity appeared in a value or gradient.
    #[error("numeric failure at node {node} ({op})")]
    Numeric { node: usize, op: &'static str },

    /// A caller violated an operation precondition (shapes, indices, configs).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A stored artifact does not match the requested configuration.
    #[error("mismatch: {0}")]
    Mismatch(String),

    /// A matrix that has to be inverted is singular.
    #[error("singular matrix in {0}")]
    Singular(&'static str),

    /// Disjoint train/test generation could not be satisfied.
    #[error("generation exhausted: {0}")]
    GenerationExhausted(String),

    /// A checkpoint, corpus or auxiliary file could not be decoded.
    #[error("malformed file {path}: {field}: {reason}")]
    Format {
        path: PathBuf,
        field: String,
        reason: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
