//! Exit codes and the JSON error record written to stderr.

use std::path::Path;

use serde::Serialize;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_MISMATCH: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;
pub const EXIT_IO: i32 = 6;

pub const EXIT_CODES_HELP: &str = "\
Exit codes:
  0  success
  1  other error (malformed file, contract violation)
  2  usage or configuration error
  3  missing checkpoint or auxiliary model
  4  configuration / checkpoint mismatch
  5  numeric failure (NaN or infinity; last good parameters are still written)
  6  I/O error

On failure a single JSON record {\"error\", \"exit_code\", \"message\"} is written to stderr.";

#[derive(Debug, Clone, Serialize)]
pub struct Failure {
    pub error: &'static str,
    pub exit_code: i32,
    pub message: String,
}

impl Failure {
    pub fn new(error: &'static str, exit_code: i32, message: impl Into<String>) -> Self {
        Self {
            error,
            exit_code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new("usage", EXIT_USAGE, message)
    }

    pub fn missing(path: &Path) -> Self {
        Self::new(
            "missing-checkpoint",
            EXIT_MISSING,
            format!("{} does not exist", path.display()),
        )
    }

    pub fn mismatch(message: impl Into<String>) -> Self {
        Self::new("mismatch", EXIT_MISMATCH, message)
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self::new("numeric-failure", EXIT_NUMERIC, message)
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new("io", EXIT_IO, format!("{}: {e}", path.display()))
    }

    pub fn record(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }
}

impl From<onion_core::Error> for Failure {
    fn from(e: onion_core::Error) -> Self {
        use onion_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Numeric { .. } => Self::numeric(msg),
            E::Mismatch(_) => Self::mismatch(msg),
            E::Io { .. } => Self::new("io", EXIT_IO, msg),
            E::Contract(_) => Self::new("contract", EXIT_OTHER, msg),
            E::Format { .. } => Self::new("format", EXIT_OTHER, msg),
            _ => Self::new("error", EXIT_OTHER, msg),
        }
    }
}
