//! Joint estimation of camera extrinsics and clock offsets from a calibration
//! board whose pose is tracked by a reference system.
//!
//! Clock convention: a device timestamp `t` corresponds to reference time
//! `t + clock_offset`, so a corner seen at `t` is compared with the board pose
//! `f_B^W(t + clock_offset)`.

mod mobile;
mod report;
mod rig;
mod static_camera;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::RigidTransform;
use crate::robust::{RansacParams, RobustError};
use crate::trajectory::{CalibrationBoard, CornerObservationSequence, PoseTrack, TrackError};

pub use mobile::{estimate_mobile_offset, mobile_objective, MobileSyncResult};
pub use report::{evaluate_calibration, mean_position_residual, write_residual_csv, CalibReport, CameraCalibReport, ObservationResidual};
pub use rig::{calibrate_rig, RigCameraInput, RigCameraOutcome, SyncGroup};
pub use static_camera::{calibrate_static_camera, calibrate_static_camera_fixed_offset, static_grid_objective, StaticCalibResult};

/// Fewest valid corner residuals a solve accepts.
pub const MIN_RESIDUALS: usize = 50;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("{camera_id}: no offset in the search range yields {required} valid residuals")]
    NoOverlap { camera_id: String, required: usize },
    #[error("{camera_id}: clock offset not identifiable, objective spans only [{minimum:.4}, {maximum:.4}] px over the grid")]
    LowIdentifiability { camera_id: String, minimum: f64, maximum: f64 },
    #[error("{camera_id}: reference camera of sync group '{group}' failed")]
    ReferenceFailed { camera_id: String, group: String },
    #[error("unknown camera '{0}'")]
    UnknownCamera(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Robust(#[from] RobustError),
    #[error(transparent)]
    Track(#[from] TrackError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyncSolveConfig {
    /// Offsets in `[-range, range]` seconds are searched.
    pub offset_search_range: f64,
    pub offset_grid_step: f64,
    pub ransac: RansacParams,
    /// Residuals whose shifted timestamp falls in a longer track gap are dropped.
    pub max_track_gap: Option<f64>,
    /// Residuals used per grid offset (evenly subsampled).
    pub grid_max_residuals: usize,
    /// RANSAC iteration cap per grid offset.
    pub grid_max_iterations: usize,
}

impl Default for SyncSolveConfig {
    fn default() -> Self {
        Self {
            offset_search_range: 0.5,
            offset_grid_step: 0.005,
            ransac: RansacParams::default(),
            max_track_gap: Some(0.1),
            grid_max_residuals: 1500,
            grid_max_iterations: 200,
        }
    }
}

impl SyncSolveConfig {
    pub fn validate(&self) -> Result<(), CalibError> {
        if !(self.offset_grid_step > 0.0) {
            return Err(CalibError::InvalidConfig("offset_grid_step must be positive".into()));
        }
        if !(self.offset_search_range > 0.0) {
            return Err(CalibError::InvalidConfig("offset_search_range must be positive".into()));
        }
        if self.max_track_gap.is_some_and(|g| !(g > 0.0)) {
            return Err(CalibError::InvalidConfig("max_track_gap must be positive".into()));
        }
        if self.grid_max_residuals < MIN_RESIDUALS || self.grid_max_iterations == 0 {
            return Err(CalibError::InvalidConfig(format!(
                "grid_max_residuals must be >= {MIN_RESIDUALS} and grid_max_iterations >= 1"
            )));
        }
        self.ransac.validate()?;
        Ok(())
    }

    /// Grid offsets, symmetric around zero.
    pub fn grid(&self) -> Vec<f64> {
        let n = (self.offset_search_range / self.offset_grid_step).round() as i64;
        (-n..=n).map(|k| k as f64 * self.offset_grid_step).collect()
    }
}

/// Corners of one frame joined with their board-frame points.
#[derive(Debug, Clone)]
pub(crate) struct BoardFrame {
    pub timestamp: f64,
    pub ids: Vec<u32>,
    pub pixels: Vec<Vector2<f64>>,
    pub points: Vec<Vector3<f64>>,
}

pub(crate) fn board_frames(obs: &CornerObservationSequence, board: &CalibrationBoard) -> Result<Vec<BoardFrame>, CalibError> {
    obs.validate()?;
    board.validate()?;
    obs.frames
        .iter()
        .map(|f| {
            let mut frame = BoardFrame { timestamp: f.timestamp, ids: Vec::new(), pixels: Vec::new(), points: Vec::new() };
            for c in &f.corners {
                let p = board.point(c.point_id).ok_or_else(|| {
                    TrackError::InvalidObservations(format!("{}: unknown board point {}", obs.camera_id, c.point_id))
                })?;
                frame.ids.push(c.point_id);
                frame.pixels.push(c.pixel);
                frame.points.push(*p);
            }
            Ok(frame)
        })
        .collect()
}

pub(crate) fn board_pose(track: &PoseTrack, t: f64, max_gap: Option<f64>) -> Option<RigidTransform> {
    track.interpolate_checked(t, max_gap).ok()
}

/// Index of the lowest objective; ties go to the smaller `|offset|`.
pub(crate) fn best_grid_index(grid: &[f64], objective: &[f64]) -> Option<usize> {
    (0..grid.len()).filter(|&i| objective[i].is_finite()).min_by(|&a, &b| {
        objective[a].total_cmp(&objective[b]).then(grid[a].abs().total_cmp(&grid[b].abs()))
    })
}

/// Flags a flat objective: variation below 5% of the minimum (or 1e-3 px).
pub(crate) fn check_identifiability(camera_id: &str, objective: &[f64]) -> Result<(), CalibError> {
    let finite = objective.iter().copied().filter(|v| v.is_finite());
    let (minimum, maximum) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if maximum - minimum < (0.05 * minimum).max(1e-3) {
        return Err(CalibError::LowIdentifiability { camera_id: camera_id.to_string(), minimum, maximum });
    }
    Ok(())
}
