use std::path::PathBuf;

use thiserror::Error;

use crate::instance::TourViolation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("instance has no nodes")]
    EmptyInstance,
    #[error("non-finite coordinate at node {0}")]
    NonFiniteCoordinate(usize),
    #[error("invalid tour: {0}")]
    TourInvalid(TourViolation),
    #[error("invalid path: node {node} repeated at index {index}")]
    PathInvalid { index: usize, node: usize },
    #[error("degenerate geometry: all points coincide")]
    DegenerateGeometry,

    #[error("format error{}: {message}", record.map(|r| format!(" in record {r}")).unwrap_or_default())]
    Format { record: Option<usize>, message: String },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },
    #[error("checksum mismatch in record {0}")]
    Checksum(usize),
    #[error("checkpoint holds model `{found}`, expected `{expected}`")]
    ModelIdMismatch { expected: String, found: String },
    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: (usize, usize), found: (usize, usize) },
    #[error("io error on {path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },

    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("no feasible action: every entry is masked")]
    NoFeasibleAction,
    #[error("batch too small: need at least 2 trajectories, got {0}")]
    BatchTooSmall(usize),

    #[error("cannot cut windows of length {m} from a tour of {n} nodes")]
    BadDecomposition { m: usize, n: usize },
    #[error("region of {k} nodes exceeds instance size {n}")]
    RegionTooLarge { k: usize, n: usize },
    #[error("exhaustive oracle limited to k <= {max}, got {k}")]
    OracleTooLarge { k: usize, max: usize },
    #[error("invalid fragment ordering: {0}")]
    OrderingInvalid(String),
    #[error("construction complete: no unvisited node left")]
    ConstructionComplete,

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn format(record: Option<usize>, message: impl Into<String>) -> Self {
        Error::Format { record, message: message.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), cause: source }
    }

    /// True for failures caused by numerics rather than data or usage.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::NoFeasibleAction)
    }
}
