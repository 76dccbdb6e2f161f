//! Crop-row keypoint perception: stereo geometry, synthetic rendering,
//! a small heatmap keypoint network, and two-stage self-supervised
//! adaptation to new visual domains.

pub mod adapt;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod net;
pub mod sim;

pub use error::{AdaptError, DataError, EvalError, GeometryError, NetError};
pub use geometry::{
    Angles, CameraRig, ConstraintReport, ConstraintTolerances, Eye, GeometricPrior,
    KeypointTriple, PixelPoint, Pose, RowGeometry,
};
pub use data::{Dataset, ModelArtifact};
pub use sim::{DomainAppearance, PoseRanges, StereoSample};
