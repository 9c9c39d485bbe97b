use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {what} at coordinate {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("trajectory diverged at step {step}")]
    Diverged { step: usize },

    #[error("time {t} outside [0, {horizon}]")]
    OutOfRange { t: f64, horizon: f64 },

    #[error("matrix is not square ({rows}x{cols})")]
    NonSquare { rows: usize, cols: usize },

    #[error("|f(x)| = {speed:e} is below the equilibrium floor {floor:e}")]
    EquilibriumProximity { speed: f64, floor: f64 },

    #[error("reparametrization lower bound a = {a} is not positive on segment {segment}")]
    InvalidReparametrization { segment: usize, a: f64 },

    #[error("section transversality lost: denominator {denominator:e}")]
    TransversalityLoss { denominator: f64 },

    #[error("no return to the section within time {horizon}")]
    NoReturn { horizon: f64 },

    #[error("synchronization lost at sample {index}")]
    SynchronizationLost { index: usize },

    #[error("unknown system id `{0}`")]
    UnknownSystem(String),

    #[error("system `{system}` needs parameter `{name}`")]
    MissingParameter { system: String, name: String },

    #[error("system `{system}` has no parameter `{name}`")]
    UnexpectedParameter { system: String, name: String },

    #[error("expression error: {0}")]
    Expression(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag, used in certificates and error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::NonFinite { .. } => "non-finite",
            Error::Diverged { .. } => "diverged",
            Error::OutOfRange { .. } => "out-of-range",
            Error::NonSquare { .. } => "non-square",
            Error::EquilibriumProximity { .. } => "equilibrium-proximity",
            Error::InvalidReparametrization { .. } => "invalid-reparametrization",
            Error::TransversalityLoss { .. } => "transversality-loss",
            Error::NoReturn { .. } => "no-return",
            Error::SynchronizationLost { .. } => "synchronization-lost",
            Error::UnknownSystem(_) => "unknown-system",
            Error::MissingParameter { .. } => "missing-parameter",
            Error::UnexpectedParameter { .. } => "unexpected-parameter",
            Error::Expression(_) => "expression",
            Error::InvalidParameter(_) => "invalid-parameter",
            Error::Precondition(_) => "precondition",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
