//! Crate-wide error type.
//!
//! Variants are grouped into three exit-code classes for the CLI:
//! configuration (2), data/format (3), numerical (4).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("out of range: {0}")]
    Range(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown encoder id: {0}")]
    Registry(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("degenerate grid: fewer than two valid positions")]
    DegenerateGrid,
    #[error("misaligned grids: {0}")]
    Alignment(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("batch error: {0}")]
    Batch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn format_at(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format { offset, msg: msg.into() }
    }

    /// CLI exit code class: 2 config, 3 data/format, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Registry(_) | Error::Range(_) => 2,
            Error::Format { .. }
            | Error::DegenerateGrid
            | Error::Alignment(_)
            | Error::Dataset(_)
            | Error::Metric(_)
            | Error::Batch(_)
            | Error::EmptyInput(_)
            | Error::Io(_) => 3,
            Error::Numerical(_) | Error::Shape(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
