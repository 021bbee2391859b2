//! Library error type.

use std::path::PathBuf;

/// Errors surfaced by the library. Variants carry enough context to produce
/// a single-line, machine-parseable message.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic in {path}: expected TMR1")]
    BadMagic { path: PathBuf },

    #[error("manifest parse failure in {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },

    #[error("truncated archive {path}: {what}")]
    Truncated { path: PathBuf, what: String },

    #[error("duplicate array name '{name}'")]
    DuplicateName { name: String },

    #[error("missing array '{name}'")]
    MissingArray { name: String },

    #[error("array '{name}' has dtype {got}, expected {expected}")]
    Dtype { name: String, expected: String, got: String },

    #[error("config parse error at line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    #[error("config key '{key}' invalid: {msg}")]
    ConfigValue { key: String, msg: String },

    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    Shape { what: String, expected: String, got: String },

    #[error("{what} exceeds capacity: limit {limit}, got {got}")]
    Capacity { what: String, limit: usize, got: usize },

    #[error("invalid argument: {msg}")]
    Invalid { msg: String },

    #[error("unsupported format version {got}, expected {expected}")]
    Version { expected: i64, got: i64 },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wraps an I/O failure with the path it happened on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Free-form validation failure.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid { msg: msg.into() }
    }
}
