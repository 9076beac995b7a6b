use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] dgr_core::Error),

    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

impl CliError {
    pub fn output(path: impl Into<PathBuf>, source: impl Into<Box<dyn std::error::Error + Send + Sync>>) -> Self {
        CliError::Output {
            path: path.into(),
            source: source.into(),
        }
    }

    /// 2 for configuration and input errors, 3 for numeric failures, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(dgr_core::Error::NonFiniteLoss { .. }) => 3,
            CliError::Core(dgr_core::Error::Io(_)) => 1,
            CliError::Core(_) => 2,
            CliError::Output { .. } => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dgr_core::GaussianCloud;

    #[test]
    fn exit_codes() {
        let nonfinite = dgr_core::Error::NonFiniteLoss {
            iteration: 4,
            snapshot: Box::new(GaussianCloud::new(vec![[1.0; 3]], vec![1.0], vec![1.0]).unwrap()),
        };
        assert_eq!(CliError::from(nonfinite).exit_code(), 3);
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        let io = dgr_core::Error::Io(std::io::Error::other("disk"));
        assert_eq!(CliError::from(io).exit_code(), 1);
    }
}
