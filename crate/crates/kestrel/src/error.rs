//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI maps them to exit codes: user/config
//! mistakes, malformed files, numerical failures, and external-service
//! failures.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or command-line input.
    #[error("config error: {0}")]
    Config(String),

    /// A contract violation on an operation's inputs.
    #[error("invalid input: {0}")]
    Validation(String),

    /// A malformed on-disk artifact (manifest, checkpoint, point file, vocab).
    #[error("format error{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Format { line: Option<usize>, msg: String },

    /// Grounded-caption grammar violation, with the byte offset of the fault.
    #[error("grammar error at byte {offset}: {msg}")]
    Grammar { offset: usize, msg: String },

    /// Non-finite loss, failed gradient check, or other numerical failure.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Remote judge unreachable or speaking the wrong protocol.
    #[error("judge error: {0}")]
    Judge(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format { line: None, msg: msg.into() }
    }

    pub fn format_at(line: usize, msg: impl Into<String>) -> Self {
        Error::Format { line: Some(line), msg: msg.into() }
    }

    /// Process exit code for the CLI: 2 validation/config, 3 numerical,
    /// 4 external service.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Validation(_) | Error::Format { .. } | Error::Io(_) => 2,
            Error::Grammar { .. } => 2,
            Error::Numerical(_) => 3,
            Error::Judge(_) => 4,
        }
    }
}
