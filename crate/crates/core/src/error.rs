use thiserror::Error;

/// Errors raised across the path-loss workflow.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("missing or ambiguous column: {0}")]
    MissingColumn(String),

    #[error("line {line}: {reason}")]
    RowParseError { line: usize, reason: String },

    #[error("input file is empty")]
    EmptyFile,

    #[error("all rows were dropped during cleaning")]
    AllRowsDropped,

    #[error("device {0} has fewer than 2 records")]
    DeviceTooSmall(String),

    #[error("device {0} timeline is too short for the requested blocking")]
    DeviceSpanTooShort(String),

    #[error("distance must be positive (got {0})")]
    NonPositiveDistance(f64),

    #[error("records carry more than one carrier frequency; use an explicit frequency offset")]
    InconsistentFrequency,

    #[error("design matrix is rank deficient")]
    RankDeficient,

    #[error("solver did not converge within {0} iterations")]
    NotConverged(usize),

    #[error("prior precision is singular")]
    SingularPrior,

    #[error("Gram matrix of the design is singular")]
    SingularGram,

    #[error("column mismatch: {0}")]
    ColumnMismatch(String),

    #[error("zero variance in response; R² undefined")]
    ZeroVariance,

    #[error("observation {0} has leverage one")]
    LeverageOne(usize),

    #[error("inference requires an unpenalized OLS fit")]
    PenalizedModelRejected,

    #[error("restricted model is not nested in the full model: {0}")]
    NotNested(String),

    #[error("column {0} is perfectly collinear with the others")]
    PerfectCollinearity(String),

    #[error("likelihood optimizer diverged for {0}")]
    OptimizerDiverged(String),

    #[error("sample is degenerate (zero spread)")]
    DegenerateSample,

    #[error("EM did not produce a finite solution")]
    EmNotConverged,

    #[error("bandwidth must be positive (got {0})")]
    BandwidthNonPositive(f64),

    #[error("every candidate bandwidth produced a degenerate likelihood")]
    AllBandwidthsDegenerate,

    #[error("critical-bandwidth bisection failed to bracket the mode count")]
    BisectionFailed,

    #[error("group {0} has fewer than 2 members")]
    GroupTooSmall(String),

    #[error("sample is empty")]
    EmptySample,

    #[error("could not bracket the quantile")]
    BracketFailure,

    #[error("at least {min} bootstrap replicates are required (got {got})")]
    InsufficientReplicates { min: usize, got: usize },

    #[error("invalid ground truth: {0}")]
    InvalidTruth(String),

    #[error("fold {fold}: {source}")]
    Fold { fold: usize, source: Box<Error> },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Strips fold annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::Fold { source, .. } => source.root(),
            other => other,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
