use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{best_grid_index, board_frames, board_pose, check_identifiability, BoardFrame, CalibError, SyncSolveConfig, MIN_RESIDUALS};
use crate::geometry::{CameraIntrinsics, RigidTransform};
use crate::trajectory::{CalibrationBoard, CornerObservationSequence, PoseTrack};

/// Width (s) at which the golden-section search stops.
const OFFSET_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MobileSyncResult {
    pub camera_id: String,
    /// Seconds; reference time = device time + offset.
    pub clock_offset: f64,
    /// Mean reprojection error over residuals within the inlier threshold, px.
    pub mean_reproj_error: f64,
    pub residual_count: usize,
    /// Robust objective (mean residual clipped at the threshold) at the optimum.
    pub objective: f64,
}

struct Evaluation {
    objective: f64,
    count: usize,
    mean_inlier: f64,
}

fn evaluate(
    frames: &[BoardFrame],
    board_track: &PoseTrack,
    hmd_track: &PoseTrack,
    hand_eye: &RigidTransform,
    intr: &CameraIntrinsics,
    cfg: &SyncSolveConfig,
    offset: f64,
) -> Evaluation {
    let clip = cfg.ransac.inlier_threshold;
    let (mut clipped, mut count, mut inlier_sum, mut inliers) = (0.0, 0usize, 0.0, 0usize);
    for f in frames {
        let t = f.timestamp + offset;
        let (Some(b), Some(h)) = (board_pose(board_track, t, cfg.max_track_gap), board_pose(hmd_track, t, cfg.max_track_gap)) else {
            continue;
        };
        // T_H^P * (f_H^W)^-1 * f_B^W: board frame into the camera.
        let chain = hand_eye.compose(&h.inverse()).compose(&b);
        for (x, px) in f.points.iter().zip(&f.pixels) {
            count += 1;
            let e = intr.project(&chain.apply(x)).map(|p| (p - px).norm()).unwrap_or(f64::INFINITY);
            clipped += e.min(clip);
            if e <= clip {
                inlier_sum += e;
                inliers += 1;
            }
        }
    }
    Evaluation {
        objective: if count >= MIN_RESIDUALS { clipped / count as f64 } else { f64::INFINITY },
        count,
        mean_inlier: if inliers > 0 { inlier_sum / inliers as f64 } else { f64::INFINITY },
    }
}

/// Robust objective of the mobile-camera offset at each offset in `offsets`.
#[allow(clippy::too_many_arguments)]
pub fn mobile_objective(
    obs: &CornerObservationSequence,
    board_track: &PoseTrack,
    hmd_track: &PoseTrack,
    hand_eye: &RigidTransform,
    board: &CalibrationBoard,
    intr: &CameraIntrinsics,
    cfg: &SyncSolveConfig,
    offsets: &[f64],
) -> Result<Vec<f64>, CalibError> {
    let frames = board_frames(obs, board)?;
    Ok(offsets
        .iter()
        .map(|&d| evaluate(&frames, board_track, hmd_track, hand_eye, intr, cfg, d).objective)
        .collect())
}

/// Clock offset of a tracked mobile camera with known hand-eye transform
/// `T_H^P`: grid search on the robust mean reprojection error, then a
/// golden-section search inside the best grid cell.
#[allow(clippy::too_many_arguments)]
pub fn estimate_mobile_offset(
    obs: &CornerObservationSequence,
    board_track: &PoseTrack,
    hmd_track: &PoseTrack,
    hand_eye: &RigidTransform,
    board: &CalibrationBoard,
    intr: &CameraIntrinsics,
    cfg: &SyncSolveConfig,
) -> Result<MobileSyncResult, CalibError> {
    cfg.validate()?;
    let frames = board_frames(obs, board)?;
    let eval = |d: f64| evaluate(&frames, board_track, hmd_track, hand_eye, intr, cfg, d);
    let grid = cfg.grid();
    let values: Vec<f64> = grid.par_iter().map(|&d| eval(d).objective).collect();
    let best = best_grid_index(&grid, &values).ok_or_else(|| CalibError::NoOverlap {
        camera_id: obs.camera_id.clone(),
        required: MIN_RESIDUALS,
    })?;
    check_identifiability(&obs.camera_id, &values)?;

    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (grid[best] - cfg.offset_grid_step, grid[best] + cfg.offset_grid_step);
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (eval(c).objective, eval(d).objective);
    while b - a > OFFSET_TOLERANCE {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = eval(c).objective;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = eval(d).objective;
        }
    }
    let mut offset = 0.5 * (a + b);
    let mut final_eval = eval(offset);
    // Never report worse than the grid optimum.
    if !(final_eval.objective <= values[best]) {
        offset = grid[best];
        final_eval = eval(offset);
    }
    Ok(MobileSyncResult {
        camera_id: obs.camera_id.clone(),
        clock_offset: offset,
        mean_reproj_error: final_eval.mean_inlier,
        residual_count: final_eval.count,
        objective: final_eval.objective,
    })
}
