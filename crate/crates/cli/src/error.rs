//! CLI error type with the exit-code split: validation problems (bad
//! config, bad inputs) versus runtime failures.

use std::fmt;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, arguments, or referenced inputs. Exit code 1.
    Validation(String),
    /// Failures while executing an otherwise valid request. Exit code 2.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "{m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<t2d_core::error::Error> for CliError {
    fn from(e: t2d_core::error::Error) -> Self {
        use t2d_core::error::Error;
        match e {
            Error::State(_) | Error::Numeric(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub fn validation(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

pub fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}
