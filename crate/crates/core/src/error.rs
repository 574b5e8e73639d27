use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty sample")]
    EmptySample,

    #[error("quantile out of range: {0}")]
    QuantileOutOfRange(f64),

    #[error("empty projection set")]
    EmptyProjectionSet,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("score needs ≥ 2 particles")]
    ScoreTooFewParticles,

    #[error("score overflow")]
    ScoreOverflow,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("singular design; set ridge > 0")]
    SingularDesign,

    #[error("unknown sensitive value {0}")]
    UnknownGroup(usize),

    #[error("empty group in KS (group {0})")]
    EmptyGroupKs(usize),

    #[error("KS needs ≥ 2 groups")]
    TooFewGroupsKs,

    #[error("exact barycenter is 1D-only")]
    ExactBarycenterNot1d,

    #[error("invalid group weights: {0}")]
    InvalidWeights(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("csv row {row}: {msg}")]
    CsvRow { row: usize, msg: String },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("{0}")]
    Data(String),

    /// A flow aborted part-way; `step` is the index of the failing step.
    #[error("numeric failure at step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by the numerics rather than by the inputs.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::ScoreOverflow | Error::NonFinite(_) | Error::SingularDesign => true,
            Error::Step { .. } => true,
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
