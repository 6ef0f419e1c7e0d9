//! Object pose estimation from per-view 2D-3D correspondence distributions:
//! single-view RANSAC-PnP with hypothesis rescoring, multi-view pairwise
//! triangulation with RANSAC + Kabsch, and optional ICP refinement on depth.

mod depth;
mod distribution;
mod model;
mod multi;
mod single;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::RigidTransform;
use crate::robust::RobustError;

pub use depth::{read_depth_raster, refine_on_depth, write_depth_raster, DepthMap, DepthRefinement, DepthStatus, IcpParams};
pub use distribution::{
    rasterize_silhouette, read_distributions_jsonl, write_distributions_jsonl, CorrespondenceDistribution, Patch, PatchMask,
};
pub use model::ObjectModel;
pub use multi::{build_3d3d, estimate_multi_view, triangulate_pair, MultiViewParams, PairStatistics};
pub use single::{estimate_single_view, score_hypothesis, RESCORE_TOP_K};

#[derive(Debug, Error)]
pub enum MvPoseError {
    #[error("multi-view estimation needs at least 2 views, got {found}")]
    NotEnoughViews { found: usize },
    #[error("unknown camera '{0}'")]
    UnknownCamera(String),
    #[error("duplicate view for camera '{0}'")]
    DuplicateView(String),
    #[error("only {accepted} 3D correspondences triangulated, need {required}")]
    FailedTriangulation { accepted: usize, required: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid object model: {0}")]
    InvalidModel(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Robust(#[from] RobustError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Schema(#[from] crate::io::SchemaError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseStatus {
    Ok,
    FailedTriangulation,
    NotEnoughInliers,
    /// Fewer than two of the requested views observed the frame.
    NotEnoughViews,
    /// The frame's inputs were rejected before estimation.
    InvalidInput,
}

/// Result of one estimation. `pose` is present exactly when `status` is ok;
/// it is `T_O^W` for multi-view and `T_O^C` for single-view estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub pose: Option<RigidTransform>,
    pub score: f64,
    pub inlier_count: usize,
    pub status: PoseStatus,
    pub views_used: Vec<String>,
    /// Accepted 3D-3D correspondences (multi-view only).
    #[serde(default)]
    pub correspondences_3d: usize,
}

impl PoseEstimate {
    pub fn failed(status: PoseStatus, views_used: Vec<String>) -> Self {
        Self { pose: None, score: 0.0, inlier_count: 0, status, views_used, correspondences_3d: 0 }
    }

    pub fn is_ok(&self) -> bool {
        self.status == PoseStatus::Ok
    }
}
