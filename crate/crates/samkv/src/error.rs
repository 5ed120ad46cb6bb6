//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by cache, analysis, and pipeline operations.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model or pipeline configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad user input (token ids, empty sequences, empty doc lists).
    #[error("input error: {0}")]
    Input(String),

    /// Cache shape or layer mismatch.
    #[error("cache error: {0}")]
    Cache(String),

    /// Recompute schedule references positions absent from the cache.
    #[error("schedule error: {0}")]
    Schedule(String),

    /// Required retained state (e.g. Q rows) is missing.
    #[error("state error: {0}")]
    State(String),

    /// Statistical analysis could not run (too few samples, etc.).
    #[error("analysis error: {0}")]
    Analysis(String),

    /// Malformed binary file (magic, version, truncation).
    #[error("format error: {0}")]
    Format(String),

    /// Two run reports are not comparable.
    #[error("comparison error: {0}")]
    Comparison(String),

    /// A pipeline stage failed; wraps the underlying error with the stage name.
    #[error("[stage:{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Tag an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage { stage, source: Box::new(self) }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
