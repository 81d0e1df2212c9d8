use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Divergence(String),
    #[error("{0}")]
    Mismatch(String),
    #[error("{0}")]
    Check(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(rq_core::Error),
    #[error(transparent)]
    Model(rq_transformer::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Mismatch(_) => 4,
            CliError::Check(_) | CliError::Io { .. } => 1,
            CliError::Core(e) => match e {
                rq_core::Error::Divergence { .. } => 3,
                rq_core::Error::Parameter(_) | rq_core::Error::InsufficientData { .. } => 2,
                rq_core::Error::Format(_) => 4,
                _ => 1,
            },
            CliError::Model(e) => match e {
                rq_transformer::Error::Divergence { .. } => 3,
                rq_transformer::Error::Config(_) => 2,
                rq_transformer::Error::Format(_) => 4,
                _ => 1,
            },
        }
    }
}

impl From<rq_core::Error> for CliError {
    fn from(e: rq_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<rq_transformer::Error> for CliError {
    fn from(e: rq_transformer::Error) -> Self {
        CliError::Model(e)
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Divergence("x".into()).exit_code(), 3);
        assert_eq!(CliError::Mismatch("x".into()).exit_code(), 4);
        assert_eq!(CliError::Check("x".into()).exit_code(), 1);
        assert_eq!(CliError::from(rq_core::Error::Parameter("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(rq_transformer::Error::Config("x".into())).exit_code(), 2);
    }
}
