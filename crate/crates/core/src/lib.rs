//! Online RGB-D camera relocalisation from scene coordinate predictions.
//!
//! Predicted pre-training-scene points index a sparse grid whose cells map to
//! point reservoirs filled from the target scene. At test time the clustered
//! reservoir contents give 2D-3D correspondences for a Kabsch / pre-emptive
//! RANSAC / LM backend, followed by ICP and depth-render ranking.

pub mod backend;
pub mod geometry;
pub mod grid;
pub mod harness;
pub mod io;
pub mod predictor;
pub mod refine;
pub mod reservoir;

pub use backend::{Correspondence, PoseHypothesis, RansacParams};
pub use geometry::{CameraIntrinsics, DepthImage, PoseError, RigidPose};
pub use grid::{GridConfig, ReservoirIndexImage, ReservoirLookupTable};
pub use harness::{Config, EvalReport, RelocaliserState};
pub use io::{FrameRecord, PredictionFile};
pub use predictor::{PredictionGrid, Predictor, SyntheticPredictorConfig};
pub use refine::{RankedResult, ScenePointModel};
pub use reservoir::{ClusterSummary, ClustererParams, Reservoir, ReservoirPoint};
