use deformsplat::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    /// 0 success, 1 failed check, 2 usage or input problem, 3 numerical
    /// failure at run time.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::CheckFailed(_) => 1,
            CliError::Core(e) => match e {
                CoreError::NonFiniteLoss { .. } | CoreError::DegenerateFrame | CoreError::DegenerateDeformedFrame { .. } => 3,
                _ => 2,
            },
        }
    }
}
