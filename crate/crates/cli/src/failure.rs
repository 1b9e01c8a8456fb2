use std::fmt;

use blindmi_core::Error;

/// A fatal error with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

pub const CONFIG: i32 = 2;
pub const UPSTREAM: i32 = 3;
pub const NUMERICAL: i32 = 4;

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: CONFIG,
            message: message.into(),
        }
    }

    pub fn upstream(message: impl Into<String>) -> Self {
        Self {
            code: UPSTREAM,
            message: message.into(),
        }
    }

    /// Prefixes the message with what was being done.
    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Parse { .. }
            | Error::ProbabilitySum { .. }
            | Error::MissingGroundTruth(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => UPSTREAM,
            Error::Numerical(_) | Error::NotConverged { .. } | Error::Degenerate(_) => NUMERICAL,
            _ => CONFIG,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}
