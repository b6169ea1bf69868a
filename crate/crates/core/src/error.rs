use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed document; `location` is a byte offset or a field path.
    #[error("parse error in {what} at {location}: {message}")]
    Parse {
        what: String,
        location: String,
        message: String,
    },

    #[error("schema violation in {what} at {location}: {message}")]
    Schema {
        what: String,
        location: String,
        message: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("weight `{name}` must be non-negative, got {value}")]
    NegativeWeight { name: &'static str, value: f64 },

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("window of side {side} centered at ({x}, {y}) leaves the {width}x{height} grid")]
    OffGrid {
        x: i64,
        y: i64,
        side: usize,
        width: usize,
        height: usize,
    },

    #[error("no feasible placement: {0}")]
    Infeasible(String),

    #[error("grid of {size} cells exceeds the exact-parse cap of {cap}; use the approximate parser")]
    CapExceeded { size: usize, cap: usize },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Process exit code used by the command-line tool for this error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::Parse { .. } | Error::Schema { .. } => 4,
            Error::Infeasible(_) => 5,
            Error::CapExceeded { .. } => 6,
            Error::InvalidInput(_)
            | Error::NegativeWeight { .. }
            | Error::DimensionMismatch { .. }
            | Error::OffGrid { .. } => 7,
        }
    }
}

/// Converts a `serde_json` error into a parse error carrying the byte offset
/// of the failure within `text`.
pub(crate) fn json_error(what: &str, text: &str, err: serde_json::Error) -> Error {
    let offset = byte_offset(text, err.line(), err.column());
    let location = format!("byte {offset} (line {}, column {})", err.line(), err.column());
    let kind = if err.is_data() { "schema" } else { "syntax" };
    let message = format!("{kind}: {err}");
    if err.is_data() {
        Error::Schema {
            what: what.to_string(),
            location,
            message,
        }
    } else {
        Error::Parse {
            what: what.to_string(),
            location,
            message,
        }
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column).min(text.len())
}
