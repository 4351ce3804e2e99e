use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("identical pair: response {0} compared with itself")]
    IdenticalPair(usize),

    #[error("unknown {what} {id}")]
    Lookup { what: &'static str, id: usize },

    #[error("structural mismatch: {0}")]
    Structure(String),

    #[error("policy is frozen and cannot be updated")]
    Frozen,

    #[error("training error: {0}")]
    Training(String),

    #[error("non-finite value in {context}: {detail}")]
    Numerical { context: String, detail: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("iteration {iteration}: {reason}")]
    Iteration { iteration: usize, reason: String },

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn parse(line: usize, reason: impl Into<String>) -> Self {
        Error::Parse {
            line,
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input rather than a failed computation.
    pub fn is_input_error(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::Parse { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
