use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("invalid transport plan: {0}")]
    InvalidPlan(String),

    #[error("invalid call quote curve at index {index}: {reason}")]
    InvalidQuotes { index: usize, reason: String },

    #[error("invalid payoff: {0}")]
    InvalidPayoff(String),

    #[error("payoff is not convex; the closed-form convex value does not apply")]
    NonConvexPayoff,

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("state lies on a region boundary; one-sided derivatives differ")]
    BoundaryState,

    #[error("unsupported simplex dimension {0} (at most 3 supported)")]
    UnsupportedDimension(usize),

    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),

    #[error("query outside the solved grid: {0}")]
    OutOfRange(String),

    #[error("invalid control: {0}")]
    InvalidControl(String),

    #[error("tree is not a martingale at depth {depth}, node {node}: value {value} vs child mean {child_mean}")]
    NonMartingaleTree {
        depth: usize,
        node: usize,
        value: f64,
        child_mean: f64,
    },

    #[error("invalid tree: {0}")]
    InvalidTree(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
