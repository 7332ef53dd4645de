use std::fmt;

use pyramid_reid::Error;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

/// A failure reported as one `error[kind]: message` line on stderr.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_INPUT,
            kind: "input",
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_INPUT,
            kind: "usage",
            message: message.into(),
        }
    }

    pub fn failure(kind: &'static str, message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_FAILURE,
            kind,
            message: message.into(),
        }
    }

    pub fn missing_flag(flag: &str) -> Self {
        CliError::usage(format!("missing required flag {flag}"))
    }

    /// Prefixes the message with what was being read or written.
    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        let (code, kind) = match e {
            Error::Diverged { .. } => (EXIT_DIVERGED, "diverged"),
            Error::Config(_) | Error::UnknownKey(_) => (EXIT_INPUT, "config"),
            Error::Dataset(_) | Error::Format(_) => (EXIT_INPUT, "data"),
            Error::Checkpoint(_) => (EXIT_INPUT, "checkpoint"),
            Error::Evaluation(_) => (EXIT_INPUT, "evaluation"),
            Error::InvalidArgument { .. } | Error::ShapeMismatch { .. } => (EXIT_INPUT, "input"),
            Error::Io(_) => (EXIT_FAILURE, "io"),
            _ => (EXIT_FAILURE, "internal"),
        };
        CliError { code, kind, message }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::failure("io", e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::failure("io", e.to_string())
    }
}

impl From<image::ImageError> for CliError {
    fn from(e: image::ImageError) -> Self {
        CliError::failure("io", e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flat: String = self
            .message
            .chars()
            .map(|c| if c == '\n' || c == '\r' { ' ' } else { c })
            .collect();
        write!(f, "error[{}]: {}", self.kind, flat.trim())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
