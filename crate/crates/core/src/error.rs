use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Format(String),
    #[error("corpus empty after k-core")]
    EmptyCorpus,
    #[error("missing items ({count} total), first: {first:?}")]
    MissingItems { count: usize, first: Vec<String> },
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in {term} at epoch {epoch}, step {step}")]
    NonFinite {
        term: String,
        epoch: usize,
        step: usize,
    },
    #[error("SID space saturated: {0}")]
    SidSpaceSaturated(String),
    #[error("duplicate SID {0:?}")]
    DuplicateSid(Vec<u16>),
    #[error("invalid prefix {0:?}")]
    InvalidPrefix(Vec<u16>),
    #[error("missing artifact: expected {0}")]
    MissingArtifact(PathBuf),
    #[error("config hash mismatch for {artifact}: artifact has {found}, current config gives {expected}")]
    HashMismatch {
        artifact: String,
        expected: String,
        found: String,
    },
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(what: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what: what.into(),
            expected,
            got,
        }
    }
}
