//! CLI error type carrying the process exit code.

pub const EXIT_OK: i32 = 0;
/// Stage execution failed (training, inversion, IO on artifacts, …).
pub const EXIT_RUNTIME: i32 = 1;
/// Unknown subcommand or malformed command line (also clap's own code).
pub const EXIT_USAGE: i32 = 2;
/// Malformed or contradictory configuration.
pub const EXIT_CONFIG: i32 = 3;
/// A stage dependency (checkpoint) is missing.
pub const EXIT_DEPENDENCY: i32 = 4;
/// The dataset could not be loaded.
pub const EXIT_DATA: i32 = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> CliError {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn dependency(message: impl Into<String>) -> CliError {
        CliError {
            code: EXIT_DEPENDENCY,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> CliError {
        CliError {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> CliError {
        CliError {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl From<invariances::error::Error> for CliError {
    fn from(e: invariances::error::Error) -> CliError {
        CliError::runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::runtime(e.to_string())
    }
}
