//! Crate-wide error type and the exit-code mapping used by the CLI.

use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or structurally invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data is malformed in a way not tied to a specific line.
    #[error("input error: {0}")]
    Input(String),

    /// An operation was called with arguments that violate its contract.
    #[error("usage error: {0}")]
    Usage(String),

    /// A numeric invariant broke (non-finite parameter, invalid gradient).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The pace schedule reached a state it cannot proceed from.
    #[error("scheduling error: {0}")]
    Schedule(String),

    /// A file failed to parse; `line` is 1-based.
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Training aborted because the objective left the plausible range.
    #[error("training diverged at pace {pace}, step {step}: {detail}")]
    Diverged {
        pace: usize,
        step: usize,
        detail: String,
    },

    /// An I/O operation failed; `path` is the file involved.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for this error: 1 for bad invocations or inputs,
    /// 2 for failures that happen while the run itself is executing.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) | Error::Usage(_) | Error::Parse { .. } => 1,
            Error::Numeric(_) | Error::Schedule(_) | Error::Diverged { .. } | Error::Io { .. } => 2,
        }
    }

    /// Shorthand for wrapping an I/O failure with the path it concerns.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_error_formats_with_line_number() {
        let err = Error::Parse {
            line: 7,
            message: "expected 10 fields, found 9".to_string(),
        };
        assert_eq!(err.to_string(), "line 7: expected 10 fields, found 9");
    }

    #[test]
    fn exit_codes_split_invocation_from_runtime() {
        assert_eq!(Error::Config("x".into()).exit_code(), 1);
        assert_eq!(Error::Usage("x".into()).exit_code(), 1);
        assert_eq!(
            Error::Parse {
                line: 1,
                message: "x".into()
            }
            .exit_code(),
            1
        );
        assert_eq!(Error::Numeric("x".into()).exit_code(), 2);
        assert_eq!(Error::Schedule("x".into()).exit_code(), 2);
        assert_eq!(
            Error::io("/tmp/x", std::io::Error::other("boom")).exit_code(),
            2
        );
    }
}
