use kapc::ApcError;

/// Failure classes with their process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or an inconsistent configuration (exit 1).
    Usage(String),
    /// Unreadable, malformed or unsuitable input data (exit 2).
    Data(String),
    /// The numerical solve failed (exit 3).
    Solver(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Solver(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Solver(m) => m,
        }
    }
}

impl From<ApcError> for CliError {
    fn from(e: ApcError) -> Self {
        let msg = e.to_string();
        match e {
            ApcError::InvalidPenalty(_) | ApcError::Unsupported(_) | ApcError::InvalidKernel(_) => CliError::Usage(msg),
            ApcError::Singular(_)
            | ApcError::DegenerateStart
            | ApcError::DegenerateProblem(_)
            | ApcError::DfTargetOutOfRange { .. }
            | ApcError::Eigensolver(_) => CliError::Solver(msg),
            _ => CliError::Data(msg),
        }
    }
}
