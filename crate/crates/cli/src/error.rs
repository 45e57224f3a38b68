use mdm_core::MdmError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("data: {0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] MdmError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 usage, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) | CliError::Io(_) => 3,
            CliError::Core(e) if e.is_numerical() => 4,
            CliError::Core(MdmError::InvalidArgument(_) | MdmError::SequenceTooLong { .. }) => 2,
            CliError::Core(_) => 3,
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_failure_class() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(
            CliError::Core(MdmError::InvalidArgument("x".into())).exit_code(),
            2
        );
        assert_eq!(
            CliError::Core(MdmError::IllPosed("x".into())).exit_code(),
            3
        );
        assert_eq!(CliError::Core(MdmError::Format("x".into())).exit_code(), 3);
        assert_eq!(
            CliError::Core(MdmError::Numerical("x".into())).exit_code(),
            4
        );
        assert_eq!(
            CliError::Core(MdmError::NotFound("x".into())).exit_code(),
            4
        );
    }
}
