use std::path::PathBuf;
use thiserror::Error;

/// Errors from projective-geometry operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point behind camera (depth {depth:.3e} <= 1e-9)")]
    PointBehindCamera { depth: f64 },
    #[error("back-projected ray does not hit the ground plane at positive depth")]
    RayAboveHorizon,
    #[error("imaged row lines are degenerate (parallel or coincident)")]
    DegenerateView,
    #[error("principal point row cy={cy} is at or below the bottom image edge {bottom}")]
    HorizonBelowBottom { cy: f64, bottom: f64 },
    #[error("cross-eye transfer failed: {0}")]
    TransferFailed(String),
    #[error("invalid {what}: {why}")]
    InvalidParameter { what: &'static str, why: String },
}

/// Errors from dataset and model persistence.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("version mismatch: found {found:?}, expected {expected:?}")]
    VersionMismatch { found: String, expected: String },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("schema violation in {field}: {why}")]
    SchemaViolation { field: String, why: String },
    #[error("shape mismatch for {name}: found {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record: {0}")]
    Malformed(String),
}

impl DataError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Errors from the keypoint network and training.
#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: found {found:?}, expected {expected:?}")]
    ShapeMismatch {
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Errors from the adaptation pipeline.
#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("vp disparity gate not passed (fraction {fraction:.3}); use the override to force stage 1")]
    GateNotPassed { fraction: f64 },
    #[error("no pseudo-labels to fine-tune on")]
    EmptyPseudoLabels,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Errors from evaluation.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("labeled set overlaps the adaptation set on ids: {0:?}")]
    OverlapWithAdaptationSet(Vec<String>),
    #[error("reports computed on mismatched sets: {0}")]
    MismatchedSets(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Data(#[from] DataError),
}
