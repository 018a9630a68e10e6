use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {shapes}")]
    Shape { op: &'static str, shapes: String },

    #[error("{0}")]
    Invalid(String),

    #[error("malformed json at line {line}: {msg}")]
    Json { line: usize, msg: String },

    #[error("missing key {key} at line {line}")]
    MissingKey { key: String, line: usize },

    #[error("document untruncatable: first sentence needs {needed} tokens, max_len is {max_len}")]
    Untruncatable { needed: usize, max_len: usize },

    #[error("empty document")]
    EmptyDocument,

    #[error("position {pos} out of range for sequence of length {len}")]
    Position { pos: usize, len: usize },

    #[error("too few points: {0}")]
    TooFewPoints(usize),

    #[error("candidate cache has no entry for document {0}")]
    CacheMiss(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, shapes: impl Into<String>) -> Self {
        Error::Shape {
            op,
            shapes: shapes.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
