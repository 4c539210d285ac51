use std::fmt;
use std::process::ExitCode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Input,
    Internal,
}

/// A fatal error: reported as `code=` / `error=` lines on stderr and mapped
/// to an exit status.
#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn config(code: &'static str, message: impl fmt::Display) -> Self {
        CliError {
            kind: Kind::Config,
            code,
            message: message.to_string(),
        }
    }

    pub fn input(code: &'static str, message: impl fmt::Display) -> Self {
        CliError {
            kind: Kind::Input,
            code,
            message: message.to_string(),
        }
    }

    pub fn internal(code: &'static str, message: impl fmt::Display) -> Self {
        CliError {
            kind: Kind::Internal,
            code,
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        match self.kind {
            Kind::Config => ExitCode::from(2),
            Kind::Input => ExitCode::from(3),
            Kind::Internal => ExitCode::from(4),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        let code = if e.kind() == std::io::ErrorKind::BrokenPipe {
            "BrokenPipe"
        } else {
            "Io"
        };
        CliError::input(code, e)
    }
}

pub type CliResult<T> = Result<T, CliError>;
