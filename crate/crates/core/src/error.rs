use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("drift produced a non-finite value in dimension {dim}")]
    NonFiniteDrift { dim: usize },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("control not observable through noisy dimensions")]
    ControlNotObservable,

    #[error("control-cost matrix is singular")]
    SingularControlCost,

    #[error("invalid control-cost matrix: {0}")]
    InvalidControlCost(String),

    #[error("Z underflow at state {state:?}")]
    ZUnderflow { state: Vec<f64> },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("constraint projection failed after {iterations} iterations: {detail}")]
    ProjectionFailed { iterations: usize, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate range in dimension {dim}: low {low} >= high {high}")]
    DegenerateRange { dim: usize, low: f64, high: f64 },

    #[error("follower ahead of leader (dx02 = {dx02})")]
    FollowerAhead { dx02: f64 },

    #[error("transition matrix is not irreducible: state {state} cannot reach every state")]
    NotIrreducible { state: usize },

    #[error("power iteration did not converge in {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("row {row}: {detail}")]
    BadRow { row: usize, detail: String },

    #[error("need at least {needed} {what}, got {got}")]
    InsufficientData {
        what: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("unknown {kind} `{name}` (registered: {known})")]
    UnknownName {
        kind: &'static str,
        name: String,
        known: String,
    },

    #[error("invalid parameter snapshot: {0}")]
    Snapshot(String),

    #[error("training aborted at iteration {iteration}: {source}\n{diagnostics}")]
    TrainingAborted {
        iteration: u64,
        diagnostics: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
