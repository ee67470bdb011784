use cape_core::CapeError;

/// Documented process exit codes.
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_PROVIDER: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;
pub const EXIT_CHECK_FAILED: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config files or input data.
    Config(String),
    /// The logit provider could not be reached, bound or queried.
    Provider(CapeError),
    /// A corpus run aborted on a failing prompt.
    Partial(CapeError),
    /// A verification command found a violation.
    CheckFailed(String),
}

impl CliError {
    pub fn from_config(e: CapeError) -> Self {
        CliError::Config(e.to_string())
    }

    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Provider(_) => EXIT_PROVIDER,
            CliError::Partial(_) => EXIT_PARTIAL,
            CliError::CheckFailed(_) => EXIT_CHECK_FAILED,
        }
    }
}

impl From<CapeError> for CliError {
    fn from(e: CapeError) -> Self {
        if e.is_provider_error() {
            CliError::Provider(e)
        } else {
            CliError::Config(e.to_string())
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) | CliError::CheckFailed(m) => f.write_str(m),
            CliError::Provider(e) => write!(f, "{e}"),
            CliError::Partial(e) => write!(f, "{e} (rerun with --skip-errors to continue past failing prompts)"),
        }
    }
}
