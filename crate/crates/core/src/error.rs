use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("consistency error at line {line}: {msg}")]
    Consistency { line: u64, msg: String },

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("singular design matrix ({rows}x{cols})")]
    SingularDesign { rows: usize, cols: usize },

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("nonpositive denominator {value} in ratio estimator")]
    NonpositiveDenominator { value: f64 },

    #[error("singular correction matrix in {0}; rerun without derivative corrections")]
    SingularCorrection(&'static str),

    #[error("bootstrap unstable: {dropped} of {requested} replicates degenerate")]
    UnstableBootstrap { dropped: usize, requested: usize },

    #[error("scenario unstable: {failed} of {requested} replicates failed")]
    UnstableScenario { failed: usize, requested: usize },
}

impl Error {
    /// Errors that make a single resample or replicate unusable without
    /// indicating a bug; bootstrap and Monte Carlo loops drop these.
    pub fn is_degenerate(&self) -> bool {
        matches!(
            self,
            Error::Degenerate(_)
                | Error::SingularDesign { .. }
                | Error::NonpositiveDenominator { .. }
                | Error::MissingData(_)
        )
    }

    /// Process exit code: 1 input/parse, 2 degeneracy, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_)
            | Error::Parse { .. }
            | Error::Consistency { .. }
            | Error::Validation(_)
            | Error::MissingData(_) => 1,
            Error::Degenerate(_) | Error::UnstableScenario { .. } => 2,
            Error::SingularDesign { .. }
            | Error::NonpositiveDenominator { .. }
            | Error::SingularCorrection(_)
            | Error::UnstableBootstrap { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
