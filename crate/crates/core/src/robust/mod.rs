//! Minimal solvers and robust estimators shared by calibration and pose
//! estimation: weighted Kabsch, P3P, Levenberg-Marquardt reprojection
//! refinement and an LO-RANSAC engine.

mod kabsch;
mod p3p;
mod ransac;
mod refine;

pub use kabsch::{kabsch, kabsch_points};
pub use p3p::solve_p3p;
pub use ransac::{
    ransac_kabsch, ransac_pnp, run_lo_ransac, Hypothesis, RansacOutcome, RansacProblem,
    KabschProblem, PnpProblem, required_iterations,
};
pub use refine::{
    refine_pose_multiview, refine_pose_reprojection, reprojection_residuals, residuals_and_jacobian,
    reprojection_rms, Refinement, ViewObservations,
};

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::GeometryError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RobustError {
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("no admissible solution")]
    NoSolution,
    #[error("not enough inliers: found {found}, need {required}")]
    NotEnoughInliers { found: usize, required: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// A weighted pixel to object-model point match.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence2D3D {
    pub pixel: Vector2<f64>,
    pub model_point: Vector3<f64>,
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

impl Correspondence2D3D {
    pub fn new(pixel: Vector2<f64>, model_point: Vector3<f64>) -> Self {
        Self {
            pixel,
            model_point,
            weight: 1.0,
        }
    }

    pub fn weighted(pixel: Vector2<f64>, model_point: Vector3<f64>, weight: f64) -> Self {
        Self {
            pixel,
            model_point,
            weight,
        }
    }
}

/// A weighted world point to object-model point match.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence3D3D {
    pub world_point: Vector3<f64>,
    pub model_point: Vector3<f64>,
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

impl Correspondence3D3D {
    pub fn new(world_point: Vector3<f64>, model_point: Vector3<f64>) -> Self {
        Self {
            world_point,
            model_point,
            weight: 1.0,
        }
    }
}

fn unit_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacParams {
    /// Pixels for 2D residuals, millimeters for 3D residuals.
    pub inlier_threshold: f64,
    pub confidence: f64,
    pub max_iterations: usize,
    pub local_opt_rounds: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            inlier_threshold: 2.0,
            confidence: 0.999,
            max_iterations: 10_000,
            local_opt_rounds: 3,
            seed: 0,
        }
    }
}

impl RansacParams {
    pub fn with_threshold(inlier_threshold: f64) -> Self {
        Self {
            inlier_threshold,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), RobustError> {
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(RobustError::InvalidParams(format!(
                "confidence {} not in (0, 1)",
                self.confidence
            )));
        }
        if self.max_iterations < 1 {
            return Err(RobustError::InvalidParams("max_iterations must be >= 1".into()));
        }
        if !(self.inlier_threshold > 0.0) {
            return Err(RobustError::InvalidParams(format!(
                "inlier_threshold {} must be positive",
                self.inlier_threshold
            )));
        }
        Ok(())
    }
}
