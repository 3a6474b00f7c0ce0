use thiserror::Error;

/// Everything that can go wrong between ingesting data and producing a report.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("matrix is not positive semidefinite (eigenvalue {0:.3e})")]
    NotPsd(f64),
    #[error("nuisance design Z is rank deficient")]
    RankDeficientZ,
    #[error("quantile level {0} is outside (0, 1)")]
    TauOutOfRange(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("quantile fit did not converge after {iterations} iterations (gap {gap:.3e})")]
    NoConvergence { iterations: usize, gap: f64 },
    #[error("trace estimate must be positive, got {0}")]
    NonpositiveTrace(f64),
    #[error("every column of the projected design is degenerate")]
    AllColumnsDegenerate,
    #[error("max-type calibration needs at least 3 columns, got {0}")]
    DimensionTooSmall(usize),
    #[error("p-value {0} must lie strictly inside (0, 1)")]
    DegeneratePValue(f64),
    #[error("sparsity {s} outside 1..={p}")]
    SparsityOutOfRange { s: usize, p: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("all {0} replications failed")]
    AllReplicationsFailed(usize),
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("bad value at row {row}, column `{column}`")]
    BadValue { row: usize, column: String },
    #[error("no rows left after filtering")]
    EmptyAfterFiltering,
    #[error("subsample size {size} exceeds the {rows} available rows")]
    SubsampleTooLarge { size: usize, rows: usize },
    #[error("reports do not share a configuration: {0}")]
    InconsistentConfigs(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("csv error: {0}")]
    Csv(String),
}

impl Error {
    /// Whether the failure is numerical (as opposed to bad input data).
    /// Errors caused by invalid settings rather than data or numerics.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::TauOutOfRange(_)
                | Error::SparsityOutOfRange { .. }
                | Error::SubsampleTooLarge { .. }
                | Error::InconsistentConfigs(_)
                | Error::DimensionTooSmall(_)
                | Error::NotSymmetric(_)
        )
    }

    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPsd(_)
                | Error::RankDeficientZ
                | Error::NoConvergence { .. }
                | Error::NonpositiveTrace(_)
                | Error::AllColumnsDegenerate
                | Error::DegeneratePValue(_)
                | Error::AllReplicationsFailed(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
