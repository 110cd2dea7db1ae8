use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("missing cell (time {time}, location {location}, variable {variable})")]
    MissingCell {
        time: i64,
        location: usize,
        variable: String,
    },
    #[error("duplicate cell (time {time}, location {location}, variable {variable})")]
    DuplicateCell {
        time: i64,
        location: usize,
        variable: String,
    },
    #[error("non-finite value at {0}")]
    NonFiniteValue(String),
    #[error("location {0} has inconsistent coordinates")]
    InconsistentCoords(usize),
    #[error("time index is not regularly spaced: {0}")]
    IrregularTimes(String),
    #[error("dataset is already centered")]
    AlreadyCentered,
    #[error("dataset must be centered first")]
    NotCentered,
    #[error("invalid partition: {0}")]
    InvalidProvidedPartition(String),
    #[error("need at least two time points, got {0}")]
    DegenerateTime(usize),
    #[error("lag {h0} must be below series length {t}")]
    LagTooLarge { h0: usize, t: usize },
    #[error("spectrum is identically zero")]
    AllZeroSpectrum,
    #[error("rank {rank} exceeds dimension {dim}")]
    RankExceedsDim { rank: usize, dim: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("signal matrix has fewer than {0} non-negligible eigenvalues")]
    RankDeficientPsi(usize),
    #[error("location ({0}, {1}) lies outside the sieve domain")]
    LocationOutsideDomain(f64, f64),
    #[error("design matrix is ill-conditioned (condition number {0:.3e})")]
    IllConditionedDesign(f64),
    #[error("singular normal equations in autoregressive update")]
    SingularUpdate,
    #[error("input matrix is rank deficient")]
    RankDeficientInput,
    #[error("too few locations: {0}")]
    TooFewLocations(String),
    #[error("unsupported artifact version {0}")]
    UnsupportedVersion(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Coarse classes used by the command line front end to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Parse,
    Numeric,
    Config,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            Io(_) | Parse(_) | MissingCell { .. } | DuplicateCell { .. } | NonFiniteValue(_)
            | InconsistentCoords(_) | IrregularTimes(_) | UnsupportedVersion(_) => ErrorClass::Parse,
            AllZeroSpectrum | RankDeficientPsi(_) | LocationOutsideDomain(..) | IllConditionedDesign(_)
            | SingularUpdate | RankDeficientInput | DegenerateTime(_) => ErrorClass::Numeric,
            AlreadyCentered | NotCentered | InvalidProvidedPartition(_) | LagTooLarge { .. }
            | RankExceedsDim { .. } | ShapeMismatch(_) | TooFewLocations(_) | Config(_) => ErrorClass::Config,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
