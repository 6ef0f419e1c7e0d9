use std::io::Write;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{board_frames, board_pose, CalibError};
use crate::geometry::CameraModel;
use crate::io::SCHEMA_VERSION;
use crate::robust::{ransac_pnp, Correspondence2D3D, RansacParams};
use crate::trajectory::{CalibrationBoard, CornerObservationSequence, PoseTrack};

/// Fewest corners for a per-frame board pose.
const MIN_FRAME_CORNERS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationResidual {
    pub camera_id: String,
    pub timestamp: f64,
    pub point_id: u32,
    pub reproj_error_px: f64,
    pub lateral_error_mm: f64,
}

/// Held-out accuracy of one calibrated camera.
///
/// Position errors compare board corners located by per-frame PnP in the
/// camera with the same corners carried through the tracker and the
/// calibration, expressed in the camera frame. On a real rig one can expect
/// roughly 1.8 px reprojection and 2.5 mm position error, with the depth
/// axis dominating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraCalibReport {
    pub camera_id: String,
    pub frames_evaluated: usize,
    pub residual_count: usize,
    pub reproj_mean_px: f64,
    pub reproj_p50_px: f64,
    pub reproj_p90_px: f64,
    pub reproj_p95_px: f64,
    /// Back-projected corner at the tracked depth vs the tracked corner.
    pub lateral_mean_mm: f64,
    pub position_mean_mm: f64,
    /// Mean absolute error along the camera's z (depth), x and y axes.
    pub depth_error_mm: f64,
    pub x_error_mm: f64,
    pub y_error_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibReport {
    pub schema_version: String,
    pub cameras: Vec<CameraCalibReport>,
    #[serde(skip)]
    pub residuals: Vec<ObservationResidual>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Nearest-rank percentile of unsorted data.
fn percentile(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * s.len() as f64).ceil().max(1.0) as usize;
    s[rank.min(s.len()) - 1]
}

/// Distance between a camera-frame point and the back-projection of `pixel`
/// at the same depth.
fn lateral_error(camera: &CameraModel, pc: &Vector3<f64>, pixel: &nalgebra::Vector2<f64>) -> f64 {
    let n = camera.intrinsics.normalize(pixel);
    (Vector3::new(n.x * pc.z, n.y * pc.z, pc.z) - pc).norm()
}

/// Mean lateral 3D residual (mm) of the observed corners given the camera's
/// extrinsics and clock offset.
pub fn mean_position_residual(
    obs: &CornerObservationSequence,
    board_track: &PoseTrack,
    board: &CalibrationBoard,
    camera: &CameraModel,
    max_gap: Option<f64>,
) -> Result<f64, CalibError> {
    let frames = board_frames(obs, board)?;
    let mut errors = Vec::new();
    for f in &frames {
        let Some(b) = board_pose(board_track, f.timestamp + camera.clock_offset, max_gap) else { continue };
        let chain = camera.extrinsics.compose(&b);
        for (x, px) in f.points.iter().zip(&f.pixels) {
            errors.push(lateral_error(camera, &chain.apply(x), px));
        }
    }
    if errors.is_empty() {
        return Err(CalibError::NoOverlap { camera_id: obs.camera_id.clone(), required: 1 });
    }
    Ok(mean(&errors))
}

fn evaluate_camera(
    camera: &CameraModel,
    obs: &CornerObservationSequence,
    board_track: &PoseTrack,
    board: &CalibrationBoard,
    max_gap: Option<f64>,
    residuals: &mut Vec<ObservationResidual>,
) -> CameraCalibReport {
    let frames = board_frames(obs, board).unwrap_or_default();
    let (mut reproj, mut lateral, mut position) = (Vec::new(), Vec::new(), Vec::new());
    let (mut ez, mut ex, mut ey) = (Vec::new(), Vec::new(), Vec::new());
    let mut frames_evaluated = 0;
    for f in &frames {
        let Some(b) = board_pose(board_track, f.timestamp + camera.clock_offset, max_gap) else { continue };
        let chain = camera.extrinsics.compose(&b);
        let truth: Vec<Vector3<f64>> = f.points.iter().map(|x| chain.apply(x)).collect();
        for ((pc, px), id) in truth.iter().zip(&f.pixels).zip(&f.ids) {
            let Ok(p) = camera.intrinsics.project(pc) else { continue };
            let r = (p - px).norm();
            let l = lateral_error(camera, pc, px);
            reproj.push(r);
            lateral.push(l);
            residuals.push(ObservationResidual {
                camera_id: camera.id.clone(),
                timestamp: f.timestamp,
                point_id: *id,
                reproj_error_px: r,
                lateral_error_mm: l,
            });
        }
        if f.points.len() < MIN_FRAME_CORNERS {
            continue;
        }
        let corr: Vec<_> = f.pixels.iter().zip(&f.points).map(|(px, x)| Correspondence2D3D::new(*px, *x)).collect();
        let Ok(detected) = ransac_pnp(&corr, &camera.intrinsics, &RansacParams::default()) else { continue };
        frames_evaluated += 1;
        for (x, t) in f.points.iter().zip(&truth) {
            let d = detected.model.apply(x) - t;
            position.push(d.norm());
            ex.push(d.x.abs());
            ey.push(d.y.abs());
            ez.push(d.z.abs());
        }
    }
    CameraCalibReport {
        camera_id: camera.id.clone(),
        frames_evaluated,
        residual_count: reproj.len(),
        reproj_mean_px: mean(&reproj),
        reproj_p50_px: percentile(&reproj, 50.0),
        reproj_p90_px: percentile(&reproj, 90.0),
        reproj_p95_px: percentile(&reproj, 95.0),
        lateral_mean_mm: mean(&lateral),
        position_mean_mm: mean(&position),
        depth_error_mm: mean(&ez),
        x_error_mm: mean(&ex),
        y_error_mm: mean(&ey),
    }
}

/// Accuracy of calibrated cameras on held-out board observations. Cameras
/// without held-out data are skipped.
pub fn evaluate_calibration(
    cameras: &[CameraModel],
    held_out: &[CornerObservationSequence],
    board_track: &PoseTrack,
    board: &CalibrationBoard,
    max_gap: Option<f64>,
) -> CalibReport {
    let mut residuals = Vec::new();
    let reports = cameras
        .iter()
        .filter_map(|cam| {
            let obs = held_out.iter().find(|o| o.camera_id == cam.id)?;
            Some(evaluate_camera(cam, obs, board_track, board, max_gap, &mut residuals))
        })
        .collect();
    CalibReport { schema_version: SCHEMA_VERSION.to_string(), cameras: reports, residuals }
}

/// Per-observation residuals as CSV, preceded by a schema comment line.
pub fn write_residual_csv<W: Write>(mut out: W, report: &CalibReport) -> Result<(), crate::trajectory::TrackError> {
    writeln!(out, "#schema_version={SCHEMA_VERSION}")?;
    let mut w = csv::Writer::from_writer(out);
    for r in &report.residuals {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
