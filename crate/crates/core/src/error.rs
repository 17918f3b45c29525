use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("aspect ratio {0} outside (0, 1)")]
    InvalidRatio(f64),

    #[error("spike {alpha} lies inside the population interval [{lo}, {hi}]")]
    SpikeInsideBulk { alpha: f64, lo: f64, hi: f64 },

    #[error("eigenvalue {lambda} is not separated from the sample bulk [{lo}, {hi}] on the requested side")]
    NotSpiked { lambda: f64, lo: f64, hi: f64 },

    #[error("variance is degenerate: (alpha - 1)^2 = {gap} <= y = {y}")]
    DegenerateVariance { gap: f64, y: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid partition rule: {0}")]
    InvalidRule(String),

    #[error("eigensolver did not converge")]
    NoConvergence,

    #[error("adjacent eigenvalues {0} and {1} coincide")]
    RepeatedEigenvalues(f64, f64),

    #[error("whitening needs raw entries or a known covariance root")]
    WhiteningUnavailable,

    #[error("eigenvectors were not computed for this spectrum")]
    EigenvectorsUnavailable,

    #[error("no valid reports to aggregate")]
    NoValidReports,

    #[error("empty input")]
    EmptyInput,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("non-finite value in field `{0}`")]
    NonFiniteField(&'static str),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("malformed csv: {0}")]
    MalformedCsv(String),

    #[error("non-numeric cell at row {row}, column {col}: {value:?}")]
    NonNumericCell { row: usize, col: usize, value: String },

    #[error("empty file")]
    EmptyFile,

    #[error("{m} machines leave shards of {rows_per_shard} rows for {cols} features")]
    TooManyMachines { m: usize, rows_per_shard: usize, cols: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("need at least {needed} points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },

    #[error("transport error: {0}")]
    Transport(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable name of the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidRatio(_) => "InvalidRatio",
            Error::SpikeInsideBulk { .. } => "SpikeInsideBulk",
            Error::NotSpiked { .. } => "NotSpiked",
            Error::DegenerateVariance { .. } => "DegenerateVariance",
            Error::InvalidParameter(_) => "InvalidParameter",
            Error::InvalidModel(_) => "InvalidModel",
            Error::InvalidShape(_) => "InvalidShape",
            Error::InvalidRule(_) => "InvalidRule",
            Error::NoConvergence => "NoConvergence",
            Error::RepeatedEigenvalues(..) => "RepeatedEigenvalues",
            Error::WhiteningUnavailable => "WhiteningUnavailable",
            Error::EigenvectorsUnavailable => "EigenvectorsUnavailable",
            Error::NoValidReports => "NoValidReports",
            Error::EmptyInput => "EmptyInput",
            Error::LengthMismatch(..) => "LengthMismatch",
            Error::NonFiniteField(_) => "NonFiniteField",
            Error::Parse(_) => "ParseError",
            Error::Schema(_) => "SchemaError",
            Error::MalformedCsv(_) => "MalformedCsv",
            Error::NonNumericCell { .. } => "NonNumericCell",
            Error::EmptyFile => "EmptyFile",
            Error::TooManyMachines { .. } => "TooManyMachines",
            Error::Config(_) => "ConfigError",
            Error::InsufficientPoints { .. } => "InsufficientPoints",
            Error::Transport(_) => "TransportError",
            Error::Io(_) => "IoError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
