use thiserror::Error;

/// Errors produced by the numeric library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate row {row}: every entry is -inf")]
    DegenerateRow { row: usize },

    #[error("non-finite function value {value} at {at}")]
    Evaluation { at: f64, value: f64 },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("no normalization constant for odd exponent {0}; use the signed kernel path")]
    UnsupportedNormalization(u32),

    #[error("kernel mode: {0}")]
    Mode(String),

    #[error("singular log-weight gradient: sinc factor {factor:e} in coordinate {coord} is at a zero")]
    SingularGradient { coord: usize, factor: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("empty neighborhood: every weight for query {query} is zero")]
    EmptyNeighborhood { query: usize },

    #[error("evaluation grid covers only {mass:.6} of the true mass")]
    Coverage { mass: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("malformed tensor stream: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
