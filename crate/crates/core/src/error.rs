use std::fmt;

/// Errors raised by the simulator, the estimators and the experiment harness.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Sub-array index outside `1..=K`.
    IndexOutOfRange { index: usize, len: usize },
    /// Source lies on (or behind) the array plane, or coincides with the anchor.
    DegenerateGeometry(String),
    /// Argument outside the mathematical domain of an operation.
    Domain(String),
    /// Invalid or inconsistent configuration.
    Config(String),
    /// Observation carries no energy.
    NoSignal,
    /// Numerically singular linear system.
    Numerical(String),
    /// Fewer sub-arrays than required to pin down a 3-D position.
    InsufficientAnchors { required: usize, provided: usize },
    /// Normal matrix of the WLS problem is singular or too ill-conditioned.
    RankDeficient { condition: f64 },
    /// Power profile is flat, so visible sub-arrays cannot be told apart.
    FlatPowerProfile,
    /// Operation not supported for the given dimensions.
    Unsupported(String),
    /// No converged samples to aggregate.
    UndefinedMetric,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::IndexOutOfRange { index, len } => {
                write!(f, "sub-array index {} out of range 1..={}", index, len)
            }
            Error::DegenerateGeometry(msg) => write!(f, "degenerate geometry: {}", msg),
            Error::Domain(msg) => write!(f, "domain error: {}", msg),
            Error::Config(msg) => write!(f, "config error: {}", msg),
            Error::NoSignal => write!(f, "observation carries no signal"),
            Error::Numerical(msg) => write!(f, "numerical error: {}", msg),
            Error::InsufficientAnchors { required, provided } => write!(
                f,
                "insufficient anchors: need {} sub-arrays, got {}",
                required, provided
            ),
            Error::RankDeficient { condition } => {
                write!(f, "rank-deficient WLS system (condition {:.3e})", condition)
            }
            Error::FlatPowerProfile => write!(f, "flat power profile, no visible sub-array"),
            Error::Unsupported(msg) => write!(f, "unsupported: {}", msg),
            Error::UndefinedMetric => write!(f, "metric undefined: no converged samples"),
        }
    }
}

impl std::error::Error for Error {}

pub type Result<T> = std::result::Result<T, Error>;
