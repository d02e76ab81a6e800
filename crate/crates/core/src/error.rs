use thiserror::Error;

pub type Result<T, E = ClueError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ClueError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("no successful trajectory found to use as expert data")]
    NoExpertFound,

    #[error("dataset carries no reward labels")]
    MissingRewards,

    #[error("degenerate return range: every trajectory returns {0}")]
    DegenerateRange(f64),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ClueError {
    pub(crate) fn dims(context: &'static str, expected: usize, got: usize) -> Self {
        ClueError::DimensionMismatch {
            context,
            expected,
            got,
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(ClueError::dims(context, expected, got))
    }
}
