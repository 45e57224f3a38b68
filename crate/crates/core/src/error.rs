use thiserror::Error;

pub type Result<T> = std::result::Result<T, MdmError>;

#[derive(Debug, Error)]
pub enum MdmError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sequence too long: layout needs {required} positions but L* = {max}")]
    SequenceTooLong { required: usize, max: usize },

    #[error("no support: {0}")]
    NoSupport(String),

    #[error("non-finite gradient in parameter group `{group}`")]
    NonFiniteGradient { group: String },

    #[error("ill-posed fit: {0}")]
    IllPosed(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl MdmError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        MdmError::InvalidArgument(msg.into())
    }

    /// True for failures caused by the data or numerics rather than caller misuse.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            MdmError::NonFiniteGradient { .. } | MdmError::Numerical(_) | MdmError::NotFound(_)
        )
    }
}
