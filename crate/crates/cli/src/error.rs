use thiserror::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    /// Library errors raised while validating configuration.
    pub fn config(e: se3lio::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<se3lio::Error> for CliError {
    fn from(e: se3lio::Error) -> Self {
        use se3lio::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidParameter(_) | E::RayEscaped { .. } => CliError::Config(msg),
            E::Numerical(_) | E::OutOfChart { .. } | E::SizeGuard { .. } => CliError::Numerical(msg),
            E::NonMonotoneTime { .. }
            | E::IndexOutOfRange { .. }
            | E::TimeOutOfSpan { .. }
            | E::PointOutOfSpan { .. }
            | E::ScanOutOfSpan { .. }
            | E::EmptyInput(_)
            | E::Parse { .. }
            | E::Io { .. } => CliError::Input(msg),
        }
    }
}
