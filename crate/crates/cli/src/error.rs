use stealthpatch_core::CoreError;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration or arguments; nothing was run.
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn missing(key: &str, expected: &str, flag: &str) -> Self {
        CliError::Validation(format!(
            "config key `{key}`: missing (expected {expected}; set it in the config file or pass {flag})"
        ))
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config { .. }
            | CoreError::InvalidValue(_)
            | CoreError::InvalidRegion(_)
            | CoreError::DimensionMismatch { .. } => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

pub type CliResult<T> = std::result::Result<T, CliError>;
