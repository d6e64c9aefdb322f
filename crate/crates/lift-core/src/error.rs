//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic, expected {expected:?} found {found:?}")]
    BadMagic {
        path: String,
        expected: String,
        found: String,
    },

    #[error("{path}: unsupported {what} version {found}, expected {expected}")]
    BadVersion {
        path: String,
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("{path}: truncated {what}, needed {needed} bytes but had {had}")]
    Truncated {
        path: String,
        what: &'static str,
        needed: usize,
        had: usize,
    },

    #[error("{op}: shape mismatch, {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: index out of range, {detail}")]
    Index { op: &'static str, detail: String },

    #[error("non-finite value produced by {node}")]
    NonFinite { node: String },

    #[error("{what} is degenerate: {detail}")]
    Degenerate { what: &'static str, detail: String },

    #[error("parameter store {label:?} is frozen")]
    Frozen { label: String },

    #[error("unknown parameter {name:?} in store {label:?}")]
    UnknownParam { label: String, name: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn index(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Index {
            op,
            detail: detail.into(),
        }
    }

    pub fn degenerate(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Degenerate {
            what,
            detail: detail.into(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
