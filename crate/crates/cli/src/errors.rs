//! Error classification for the process exit code: 1 for configuration and
//! I/O problems, 2 for numerical failures, 3 for solver or fit
//! non-convergence.

use std::fmt;

use purcellsim_core::CoreError;

#[derive(Debug)]
pub enum CliError {
    /// Bad config file, missing block, invalid paths or parameter values.
    Config(String),
    /// Filesystem failures while reading inputs or writing outputs.
    Io(String),
    /// Error surfaced by the physics library.
    Core(CoreError),
    /// An iterative routine finished without meeting its tolerance.
    NonConvergence(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(msg: impl Into<String>) -> Self {
        CliError::Io(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::NonConvergence(_) => 3,
            CliError::Core(e) => match e {
                // operating-point and sizing mistakes are config-class
                CoreError::InvalidInput { .. }
                | CoreError::DimensionGuard { .. }
                | CoreError::ResonantDrive { .. } => 1,
                CoreError::NegativeRadicand { .. }
                | CoreError::DivisionByZero { .. }
                | CoreError::InconsistentTimes { .. }
                | CoreError::StepTooLarge { .. }
                | CoreError::PositivityLoss { .. }
                | CoreError::WeakDriveViolated { .. } => 2,
                CoreError::QuadratureNonConvergence { .. }
                | CoreError::NoStableBranch { .. }
                | CoreError::SteadyStateNotConverged { .. }
                | CoreError::NonUniqueSteadyState { .. }
                | CoreError::FitUnstable { .. }
                | CoreError::SingularNormalMatrix { .. }
                | CoreError::InsufficientDuration { .. } => 3,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::NonConvergence(m) => write!(f, "did not converge: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}
