use serde::Serialize;

/// Failures surfaced by the command line, each with its own exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("malformed config: {0}")]
    Config(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("{0}")]
    Parse(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::NotFound(_) => 4,
            CliError::Parse(_) => 5,
            CliError::Dimension { .. } => 6,
            CliError::Input(_) => 7,
            CliError::Numerical(_) => 8,
            CliError::Verification(_) => 9,
            CliError::Io(_) => 10,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::NotFound(_) => "not_found",
            CliError::Parse(_) => "parse",
            CliError::Dimension { .. } => "dimension_mismatch",
            CliError::Input(_) => "invalid_input",
            CliError::Numerical(_) => "numerical",
            CliError::Verification(_) => "verification_failed",
            CliError::Io(_) => "io",
        }
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Payload<'a> {
            error: &'a str,
            message: String,
            exit_code: i32,
        }
        serde_json::to_string(&Payload {
            error: self.kind(),
            message: self.to_string(),
            exit_code: self.exit_code(),
        })
        .unwrap_or_else(|_| format!("{{\"error\":\"{}\"}}", self.kind()))
    }
}

impl From<pfgm_core::Error> for CliError {
    fn from(e: pfgm_core::Error) -> Self {
        use pfgm_core::Error as E;
        match e {
            E::DimensionMismatch { expected, got } => CliError::Dimension { expected, got },
            E::UnknownDataset(name) => CliError::Input(format!("unknown dataset `{name}`")),
            E::DegenerateField { .. } | E::NonFinite { .. } | E::NonFiniteDivergence { .. } | E::StepBudget { .. } => {
                CliError::Numerical(e.to_string())
            }
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<pfgm_core::ode::OdeAbort> for CliError {
    fn from(e: pfgm_core::ode::OdeAbort) -> Self {
        pfgm_core::Error::from(e).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Parse(format!("json: {e}"))
    }
}
