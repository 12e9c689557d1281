//! Command errors and their exit codes.

use std::fmt;

/// Exit code 1: the caller supplied bad input. Exit code 2: an internal
/// invariant failed (or `verify` found a violation).
#[derive(Debug)]
pub enum CliError {
    Input(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::Internal(_) => 2,
        }
    }

    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "error: {m}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<segkv::Error> for CliError {
    fn from(e: segkv::Error) -> Self {
        use segkv::Error as E;
        match e {
            E::NonFinite(_) | E::ShapeMismatch(_) => CliError::Internal(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Input(format!("csv: {e}"))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let missing = segkv::Error::io("g.json", std::io::Error::from(std::io::ErrorKind::NotFound));
        let e = CliError::from(missing);
        assert_eq!(e.exit_code(), 1);
        assert!(e.to_string().contains("g.json"));
        assert_eq!(CliError::from(segkv::Error::NonFinite("matmul")).exit_code(), 2);
    }
}
