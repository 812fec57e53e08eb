use std::path::PathBuf;

/// Errors produced anywhere in the core library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller handed in tensors or arguments that break an operation's contract.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("severity {severity} is outside the legal domain of `{attack}`: {reason}")]
    SeverityDomain {
        attack: &'static str,
        severity: f64,
        reason: String,
    },

    /// The configuration file could not be parsed against the schema.
    #[error("config schema error at `{path}`: {message}")]
    ConfigSchema { path: String, message: String },

    /// The configuration parsed but violates an invariant.
    #[error("invalid config field `{field}`: {message}")]
    ConfigInvalid { field: String, message: String },

    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("unsupported checkpoint version {found} (this build reads version {expected})")]
    CheckpointVersion { found: String, expected: u32 },

    #[error("training aborted at step {step}: non-finite {what}")]
    NonFinite { step: u64, what: String },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::ConfigInvalid {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
