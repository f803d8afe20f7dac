use std::io;

use thiserror::Error;

/// Errors produced anywhere in the engine.
///
/// The variants line up with the failure classes the command-line tool maps
/// onto distinct exit codes (see [`crate::cli::ExitCode`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("geometry error{}: {message}", layer.map(|l| format!(" at layer {l}")).unwrap_or_default())]
    Geometry {
        layer: Option<usize>,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("syntax error at position {position}: {message}")]
    Syntax { position: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("label out of range: {label} (class count {classes})")]
    LabelRange { label: usize, classes: usize },

    #[error("state error: {0}")]
    State(String),

    #[error("precision error: {0}")]
    Precision(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn geometry(layer: Option<usize>, message: impl Into<String>) -> Self {
        Error::Geometry {
            layer,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
