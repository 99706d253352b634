use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate name `{0}`")]
    DuplicateName(String),
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("negative capacity {value} for `{node}` on service `{service}`")]
    NegativeCapacity {
        node: String,
        service: String,
        value: f64,
    },
    #[error("service kinds list is empty")]
    EmptyKinds,
    #[error("horizon must be at least 1, got {0}")]
    InvalidHorizon(u32),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("unbounded: {0}")]
    Unbounded(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("demand {demand} exceeds total capacity {capacity}")]
    InfeasibleDemand { demand: f64, capacity: f64 },
    #[error("unsupported constraints: {0}")]
    UnsupportedConstraints(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("exact Shapley enumeration supports at most {max} leaves, tree has {leaves}")]
    TooManyLeaves { leaves: usize, max: usize },
    #[error("malformed price row {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("missing hour {0} in price series")]
    MissingHour(u32),
    #[error("duplicate hour {0} in price series")]
    DuplicateHour(u32),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
