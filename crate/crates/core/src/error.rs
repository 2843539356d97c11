//! Error type shared by every module of the harness.

use std::path::PathBuf;

use crate::io::tedh::TedhError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller passed an argument outside the operation's domain.
    #[error("argument error: {0}")]
    Argument(String),

    /// NaN/Inf produced, zero-norm vector, zero variance and similar.
    #[error("numeric-domain error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    /// Illegal state transition (e.g. unfreezing frozen fusion weights).
    #[error("state error: {0}")]
    State(String),

    #[error("{path}:{line}: record {id:?}: {msg}")]
    Record {
        path: PathBuf,
        line: usize,
        id: Option<String>,
        msg: String,
    },

    #[error("TEDH format error ({}): {0}", .0.code())]
    Tedh(#[from] TedhError),

    /// Failure attributed to one input item (a caption id, a seed...).
    #[error("{id}: {source}")]
    Item {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn item(id: impl Into<String>, source: Error) -> Self {
        Error::Item {
            id: id.into(),
            source: Box::new(source),
        }
    }

    /// Short machine-readable kind used in CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Argument(_) => "argument",
            Error::Numeric(_) => "numeric",
            Error::Config(_) => "config",
            Error::State(_) => "state",
            Error::Record { .. } => "record",
            Error::Tedh(_) => "format",
            Error::Checkpoint(_) => "format",
            Error::Item { source, .. } => source.kind(),
            Error::Io { .. } => "io",
        }
    }
}

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "{what}: non-finite value {} at index {i}",
            values[i]
        )));
    }
    Ok(())
}
