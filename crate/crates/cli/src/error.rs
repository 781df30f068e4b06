use std::fmt;

use strokeforge::error::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Exit code 1: the invocation or its inputs are wrong.
pub const EXIT_VALIDATION: i32 = 1;
/// Exit code 2: the inputs were accepted but the run failed.
pub const EXIT_INTERNAL: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Internal(String),
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        CliError::Internal(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "error: {m}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_)
            | Error::Input(_)
            | Error::ShapeMismatch { .. }
            | Error::Geometry(_)
            | Error::NoEnhancement { .. }
            | Error::Checkpoint(_)
            | Error::Volume(_) => CliError::Validation(msg),
            Error::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => CliError::Validation(msg),
            _ => CliError::Internal(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::from(Error::Io(e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taxonomy() {
        assert_eq!(CliError::from(Error::Config("x".into())).exit_code(), EXIT_VALIDATION);
        let missing = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        assert_eq!(CliError::from(missing).exit_code(), EXIT_VALIDATION);
        let nan = Error::Domain {
            op: "train_step",
            detail: "loss is NaN".into(),
        };
        assert_eq!(CliError::from(nan).exit_code(), EXIT_INTERNAL);
        let denied = std::io::Error::new(std::io::ErrorKind::PermissionDenied, "no");
        assert_eq!(CliError::from(denied).exit_code(), EXIT_INTERNAL);
    }
}
