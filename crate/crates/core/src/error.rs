use std::path::PathBuf;

/// Errors produced anywhere in the pose-estimation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("point has non-positive depth z = {0}")]
    NonPositiveDepth(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate distribution: top eigenvalues {0:.3e} and {1:.3e} do not separate")]
    DegenerateDistribution(f64, f64),

    #[error("empty input")]
    EmptyInput,

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("ground-truth position has zero norm")]
    ZeroNormGroundTruth,

    #[error("division by zero: denominator {0} must be positive")]
    DivisionByZero(f64),

    #[error("invalid distance bins: {0}")]
    InvalidBins(String),

    #[error("could not place target inside the camera frustum after {0} attempts")]
    FrustumSamplingExhausted(usize),

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest {path}: {msg}")]
    MalformedManifest { path: PathBuf, msg: String },

    #[error("missing image {0}")]
    MissingImage(PathBuf),

    #[error("invalid quaternion for {id}: norm {norm}")]
    InvalidQuaternion { id: String, norm: f64 },

    #[error("non-finite loss at epoch {epoch}; offending sample ids: {ids:?}")]
    NonFiniteLoss { epoch: usize, ids: Vec<String> },

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("missing predictions for {} image(s): {}", .0.len(), .0.join(", "))]
    MissingPrediction(Vec<String>),

    #[error("prediction for unknown image id {0}")]
    UnknownId(String),

    #[error("malformed {what} at line {line}: {msg}")]
    Malformed {
        what: &'static str,
        line: usize,
        msg: String,
    },

    #[error("image codec error on {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("report is empty: {0}")]
    EmptyReport(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
