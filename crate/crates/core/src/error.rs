use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),

    #[error("matrix is not positive definite after jitter ladder {ladder:?}")]
    Singular { ladder: Vec<f64> },

    #[error(
        "covariance normalization is degenerate (max(K_mm) == min(K_mm) = {value}); \
         use the plain metric for single-inducing-point models"
    )]
    DegenerateNormalization { value: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("non-finite objective: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True for failures of the numerical machinery rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Singular { .. }
            | Error::DegenerateNormalization { .. }
            | Error::NonFinite(_) => true,
            Error::Context { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
