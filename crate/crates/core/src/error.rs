use thiserror::Error;

pub type Result<T, E = DdlError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DdlError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("labeled corpus required: {0}")]
    LabelsRequired(String),

    #[error("class {0} has no elements")]
    MissingClass(usize),

    #[error("class {0} has a zero-norm centroid")]
    DegenerateClass(usize),

    #[error("near-singular ratio: hardest-negative similarity {value:e} is below the guard")]
    NearSingularRatio { value: f64 },

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("config error: {0}")]
    Config(String),
}

impl From<csv::Error> for DdlError {
    fn from(err: csv::Error) -> Self {
        let line = err.position().map(|p| p.line()).unwrap_or(0);
        match err.into_kind() {
            csv::ErrorKind::Io(io) => DdlError::Io(io),
            other => DdlError::Parse {
                line,
                message: format!("{other:?}"),
            },
        }
    }
}
