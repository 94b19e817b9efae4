use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unbound placeholder `{0}`")]
    Unbound(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("no derivative registered for {0}")]
    NoDerivative(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("constraint not met: {0}")]
    ConstraintNotMet(String),

    #[error("numerical failure at iteration {iteration}: {detail}")]
    Numerical { iteration: usize, detail: String },

    #[error("structural mismatch: {0}")]
    Structure(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io { .. } | Error::Json(_) => 2,
            Error::ConstraintNotMet(_) => 3,
            Error::NonFinite(_) | Error::Numerical { .. } => 4,
            _ => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let io = Error::io("x", std::io::Error::other("gone"));
        assert_eq!(io.exit_code(), 2);
        assert_eq!(Error::Config("k".into()).exit_code(), 2);
        assert_eq!(Error::ConstraintNotMet("budget".into()).exit_code(), 3);
        assert_eq!(Error::NonFinite("exp".into()).exit_code(), 4);
        let num = Error::Numerical {
            iteration: 5,
            detail: "nan loss".into(),
        };
        assert_eq!(num.exit_code(), 4);
        assert!(num.to_string().contains("iteration 5"));
        assert_eq!(Error::Shape("2x3".into()).exit_code(), 1);
    }
}
