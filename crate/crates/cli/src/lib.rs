//! Pipeline commands behind the `greybox` binary.

pub mod commands;
pub mod config;

use std::fmt;

/// Failure classes, each with its own process exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numeric(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<greybox::Error> for CliError {
    fn from(e: greybox::Error) -> Self {
        use greybox::Error as E;
        let msg = e.to_string();
        if e.is_numeric() {
            CliError::Numeric(msg)
        } else if e.is_io() || matches!(e, E::MissingMeta(_) | E::Checksum { .. } | E::Row { .. } | E::Version { .. } | E::Schema(_)) {
            CliError::Io(msg)
        } else {
            CliError::Config(msg)
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(e.to_string())
    }
}
