use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("no tickers satisfy history requirement")]
    InsufficientHistory,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("zero variance")]
    ZeroVariance,
    #[error("value {value} outside the attainable range of the transform for lambda {lambda}")]
    TransformDomain { value: f64, lambda: f64 },

    #[error("data contains non-finite values")]
    NonFiniteData,
    #[error("estimation failed: {0}")]
    Estimation(String),
    #[error("transition matrix is reducible")]
    ReducibleChain,

    #[error("Sigma not positive definite")]
    NotPositiveDefinite,
    #[error("undefined correlation")]
    UndefinedCorrelation,
    #[error("value {0} outside [-1, 1]")]
    CorrelationDomain(f64),
    #[error("target Spearman {target} unreachable; achievable range is [{min:.4}, {max:.4}]")]
    UnreachableTarget { target: f64, min: f64, max: f64 },
    #[error("calibration did not reach target {target} within tolerance (best {best})")]
    CalibrationStalled { target: f64, best: f64 },

    #[error("sector {sector}: {source}")]
    Sector {
        sector: String,
        #[source]
        source: Box<Error>,
    },
    #[error("simulation exceeded {0} out-of-domain redraws")]
    ResampleLimit(usize),

    #[error("return domain error: weekly change {0} must exceed -1")]
    ReturnDomain(f64),
    #[error("no positive-return allocation")]
    NoPositiveReturnAllocation,
    #[error("objective is unbounded over the feasible set")]
    Unbounded,
    #[error("ticker {0} missing from test panel")]
    MissingTicker(String),

    #[error("config error: {0}")]
    Config(String),
    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    /// Name of the pipeline stage an error originates from.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::InsufficientHistory
            | Error::Io { .. } => "data_ingest",
            Error::ZeroVariance | Error::TransformDomain { .. } => "transforms",
            Error::NonFiniteData | Error::Estimation(_) | Error::ReducibleChain => "hmm_core",
            Error::NotPositiveDefinite
            | Error::UndefinedCorrelation
            | Error::CorrelationDomain(_)
            | Error::UnreachableTarget { .. }
            | Error::CalibrationStalled { .. } => "mmc_copula",
            Error::Sector { source, .. } => source.module(),
            Error::ResampleLimit(_) => "lhmm",
            Error::ReturnDomain(_)
            | Error::NoPositiveReturnAllocation
            | Error::Unbounded
            | Error::MissingTicker(_) => "portfolio",
            Error::Config(_) | Error::Serialization(_) => "cli_backtest",
        }
    }
}
