use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller passed a value outside an operation's domain.
    #[error("invalid input: {0}")]
    Input(String),

    /// An on-disk artifact does not match its documented schema.
    #[error("format error in {}{}: {message}", path.display(), location(*line, *column, field))]
    Format {
        path: PathBuf,
        line: Option<usize>,
        column: Option<usize>,
        field: Option<String>,
        message: String,
    },

    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn location(line: Option<usize>, column: Option<usize>, field: &Option<String>) -> String {
    let mut out = String::new();
    if let Some(l) = line {
        out.push_str(&format!(" line {l}"));
        if let Some(c) = column {
            out.push_str(&format!(" column {c}"));
        }
    }
    if let Some(f) = field {
        out.push_str(&format!(" field `{f}`"));
    }
    out
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn format(path: impl AsRef<Path>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().to_path_buf(),
            line: None,
            column: None,
            field: None,
            message: message.into(),
        }
    }

    /// Format error carrying the line, column and field path of a JSON failure.
    pub fn json(path: impl AsRef<Path>, err: serde_path_to_error::Error<serde_json::Error>) -> Self {
        let field = err.path().to_string();
        let inner = err.into_inner();
        Error::Format {
            path: path.as_ref().to_path_buf(),
            line: Some(inner.line()),
            column: Some(inner.column()),
            field: (field != ".").then_some(field),
            message: inner.to_string(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) | Error::Format { .. } => 2,
            Error::Io { .. } => 3,
        }
    }
}

/// Shorthand for returning an [`Error::Input`] from a function.
macro_rules! bail_input {
    ($($arg:tt)*) => {
        return Err($crate::error::Error::Input(format!($($arg)*)))
    };
}
pub(crate) use bail_input;
