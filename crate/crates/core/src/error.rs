use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("graph is not strongly connected: no path from `{from}` to `{to}`")]
    NotStronglyConnected { from: String, to: String },

    #[error("edge `{from}` -> `{to}` has non-positive traversal time {tm}")]
    NonPositiveTraversalTime { from: String, to: String, tm: i64 },

    #[error("graph has no vertices")]
    EmptyGraph,

    #[error("unknown vertex `{0}`")]
    UnknownVertex(String),

    #[error("duplicate vertex `{0}`")]
    DuplicateVertex(String),

    #[error("duplicate edge `{from}` -> `{to}`")]
    DuplicateEdge { from: String, to: String },

    #[error("memory count must be at least 1")]
    ZeroMemory,

    #[error("every probability in the row of configuration {0} is below the cutoff threshold")]
    EmptyRow(String),

    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),

    #[error("singular matrix (pivot magnitude {pivot:.3e} in column {column})")]
    SingularMatrix { pivot: f64, column: usize },

    #[error("unknown reference: {0}")]
    UnknownReference(String),

    #[error("illegal denominator: {0}")]
    IllegalDenominator(String),

    #[error("no payoff given for vertex `{0}`")]
    MissingPayoff(String),

    #[error("target set is empty")]
    EmptyTargets,

    #[error("attack distribution is required")]
    MissingAttackDistribution,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no smooth sample point in {0} draws for the difference check")]
    NoSmoothPoint(usize),

    #[error("parse error in {source_name} at line {line}, column {column}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
