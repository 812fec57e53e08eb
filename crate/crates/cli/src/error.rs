use std::fmt;

use wmrobust_core::Error;

/// Process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitCode {
    Usage = 1,
    Data = 2,
    Training = 3,
    Format = 4,
}

impl ExitCode {
    fn label(self) -> &'static str {
        match self {
            ExitCode::Usage => "usage",
            ExitCode::Data => "data",
            ExitCode::Training => "training",
            ExitCode::Format => "format",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub code: ExitCode,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: ExitCode::Usage,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            code: ExitCode::Data,
            message: message.into(),
        }
    }

    /// Errors raised while training are reported as training failures
    /// unless they are clearly about the inputs.
    pub fn in_training(e: Error) -> Self {
        let mut err = CliError::from(e);
        if err.code == ExitCode::Usage {
            err.code = ExitCode::Training;
        }
        err
    }

    /// The single-line JSON record written to stderr.
    pub fn record(&self) -> String {
        serde_json::json!({
            "error": self.code.label(),
            "exit_code": self.code as i32,
            "message": self.message,
        })
        .to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Contract(_)
            | Error::SeverityDomain { .. }
            | Error::ConfigSchema { .. }
            | Error::ConfigInvalid { .. } => ExitCode::Usage,
            Error::Ingest(_) | Error::Io { .. } => ExitCode::Data,
            Error::NonFinite { .. } => ExitCode::Training,
            Error::Checkpoint(_) | Error::CheckpointVersion { .. } => ExitCode::Format,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
