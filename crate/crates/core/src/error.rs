use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("singular design: reciprocal condition number {rcond:.3e} below {threshold:.1e}")]
    SingularDesign { rcond: f64, threshold: f64 },

    #[error("separation detected: fitted linear predictor reached {max_eta:.1} without convergence")]
    SeparationDetected { max_eta: f64 },

    #[error("treatment vector contains a single class")]
    SingleClass,

    #[error("degenerate propensity score {pi} at row {row}")]
    DegenerateScore { row: usize, pi: f64 },

    #[error("argument outside its domain: {0}")]
    DomainError(String),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("resampling exhausted after {attempts} attempts ({failures} failed)")]
    ResampleExhausted { attempts: usize, failures: usize },

    #[error("at least 40 bootstrap resamples are required for percentile intervals, got {0}")]
    InsufficientB(usize),

    #[error("missing columns: {}", .0.join(", "))]
    SchemaMismatch(Vec<String>),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("row {row}: {message}")]
    MalformedRow { row: usize, message: String },

    #[error("study aborted: {failures} of {total} repetitions failed")]
    StudyAborted { failures: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn at_stage(self, stage: usize) -> Error {
        match self {
            e @ Error::Stage { .. } => e,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Stage { source, .. } => source.kind(),
            Error::InvalidSpec(_) | Error::InsufficientB(_) | Error::Json(_) => ErrorKind::Config,
            Error::SchemaMismatch(_) | Error::MalformedRow { .. } | Error::Io(_) | Error::Csv(_) => {
                ErrorKind::Data
            }
            Error::DimensionMismatch(_)
            | Error::SingularDesign { .. }
            | Error::SeparationDetected { .. }
            | Error::SingleClass
            | Error::DegenerateScore { .. }
            | Error::DomainError(_)
            | Error::ResampleExhausted { .. }
            | Error::StudyAborted { .. } => ErrorKind::Numerical,
        }
    }
}
