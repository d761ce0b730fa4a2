use std::fmt;

use crate::config::ConfigError;

/// Process exit codes.
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_DIVERGENCE: u8 = 3;
pub const EXIT_GRADCHECK: u8 = 4;
pub const EXIT_INTERNAL: u8 = 1;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub fn input(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            msg: msg.into(),
        }
    }

    pub fn output(path: &std::path::Path, e: impl fmt::Display) -> Self {
        Self {
            code: EXIT_INTERNAL,
            msg: format!("cannot write {}: {e}", path.display()),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::input(e.to_string())
    }
}

impl From<dwmt_core::Error> for Failure {
    fn from(e: dwmt_core::Error) -> Self {
        match e {
            dwmt_core::Error::Divergence { step, task, value } => Self {
                code: EXIT_DIVERGENCE,
                msg: format!(
                    "training diverged at step {step}: task index {task} produced {value}"
                ),
            },
            other => Self::input(other.to_string()),
        }
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;
