use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty document{}", user.as_ref().map(|u| format!(" for user {u}")).unwrap_or_default())]
    EmptyDocument { user: Option<String> },

    #[error("empty corpus: cannot build a vocabulary from zero documents")]
    EmptyCorpus,

    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value in tensor {tensor}")]
    NonFinite { tensor: String },

    #[error("training diverged at iteration {iteration} (dev loss {loss})")]
    Diverged { iteration: usize, loss: f64 },

    #[error("degenerate label set: {0}")]
    DegenerateLabels(String),

    #[error(
        "no feasible single-task width for a budget of {budget} parameters (input dim {input_dim})"
    )]
    NoFeasibleWidth { budget: usize, input_dim: usize },

    #[error("{path}:{line}: {msg}")]
    Config {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("invalid value for `{key}`: {msg}")]
    InvalidValue { key: String, msg: String },

    #[error("{path}: {msg}")]
    Format { path: String, msg: String },

    #[error("{path}: unsupported format version {found} (expected {expected})")]
    Version {
        path: String,
        found: String,
        expected: String,
    },

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("{0}")]
    Invalid(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code for this error class: 1 runtime/numeric failure,
    /// 2 usage/config error, 3 data-format error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidValue { .. } | Error::UnknownTask(_) => 2,
            Error::Format { .. }
            | Error::Version { .. }
            | Error::EmptyDocument { .. }
            | Error::EmptyCorpus
            | Error::DegenerateLabels(_) => 3,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl std::fmt::Display, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_string(),
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(
        op: &'static str,
        expected: impl Into<String>,
        got: impl Into<String>,
    ) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }
}
