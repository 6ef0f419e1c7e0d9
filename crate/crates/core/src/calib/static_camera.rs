use nalgebra::{DMatrix, DVector, SMatrix, SVector, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    best_grid_index, board_frames, board_pose, check_identifiability, BoardFrame, CalibError, SyncSolveConfig,
    MIN_RESIDUALS,
};
use crate::geometry::{skew, CameraIntrinsics, CameraModel, RigidTransform};
use crate::robust::{ransac_pnp, refine_pose_reprojection, Correspondence2D3D, RansacParams};
use crate::trajectory::{CalibrationBoard, CornerObservationSequence, PoseTrack};

/// Central-difference step (s) for the offset column of the joint Jacobian.
const OFFSET_DIFF_STEP: f64 = 1e-3;
const MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticCalibResult {
    pub camera_id: String,
    /// `T_W^C`
    pub extrinsics: RigidTransform,
    /// Seconds; reference time = device time + offset.
    pub clock_offset: f64,
    /// True when the offset was imposed by a sync group rather than solved.
    pub offset_fixed: bool,
    pub inlier_ratio: f64,
    /// Mean reprojection error over inliers, px.
    pub mean_reproj_error: f64,
    pub residual_count: usize,
    pub inlier_count: usize,
    /// Best offset of the coarse grid, before refinement.
    pub grid_offset: f64,
    pub refine_iterations: usize,
}

impl StaticCalibResult {
    pub fn camera_model(&self, intrinsics: CameraIntrinsics) -> CameraModel {
        let mut cam = CameraModel::new(self.camera_id.clone(), intrinsics, self.extrinsics);
        cam.clock_offset = self.clock_offset;
        cam
    }
}

#[derive(Debug, Clone, Copy)]
struct SampleRef {
    frame: usize,
    corner: usize,
}

/// World-point correspondences at `offset`, keeping every `stride`-th corner.
fn correspondences_at(
    frames: &[BoardFrame],
    track: &PoseTrack,
    offset: f64,
    max_gap: Option<f64>,
    stride: usize,
) -> (Vec<Correspondence2D3D>, Vec<SampleRef>) {
    let mut corr = Vec::new();
    let mut refs = Vec::new();
    let mut k = 0usize;
    for (fi, f) in frames.iter().enumerate() {
        let pose = board_pose(track, f.timestamp + offset, max_gap);
        for ci in 0..f.points.len() {
            let take = k.is_multiple_of(stride);
            k += 1;
            if let (true, Some(pose)) = (take, pose.as_ref()) {
                corr.push(Correspondence2D3D::new(f.pixels[ci], pose.apply(&f.points[ci])));
                refs.push(SampleRef { frame: fi, corner: ci });
            }
        }
    }
    (corr, refs)
}

fn clipped_mean(pose: &RigidTransform, corr: &[Correspondence2D3D], intr: &CameraIntrinsics, clip: f64) -> f64 {
    let sum: f64 = corr
        .iter()
        .map(|c| intr.project(&pose.apply(&c.model_point)).map(|p| (p - c.pixel).norm().min(clip)).unwrap_or(clip))
        .sum();
    sum / corr.len() as f64
}

fn grid_stride(frames: &[BoardFrame], cfg: &SyncSolveConfig) -> usize {
    let total: usize = frames.iter().map(|f| f.points.len()).sum();
    total.div_ceil(cfg.grid_max_residuals).max(1)
}

fn objective_at(
    frames: &[BoardFrame],
    track: &PoseTrack,
    intr: &CameraIntrinsics,
    cfg: &SyncSolveConfig,
    offset: f64,
    stride: usize,
    min_count: usize,
) -> f64 {
    let (corr, _) = correspondences_at(frames, track, offset, cfg.max_track_gap, stride);
    if corr.len() < min_count {
        return f64::INFINITY;
    }
    let theta = cfg.ransac.inlier_threshold;
    let params = RansacParams { max_iterations: cfg.grid_max_iterations.min(cfg.ransac.max_iterations), ..cfg.ransac };
    match ransac_pnp(&corr, intr, &params) {
        Ok(out) => clipped_mean(&out.model, &corr, intr, theta),
        Err(_) => theta,
    }
}

/// Coarse-grid objective: mean reprojection error clipped at the inlier
/// threshold, after RANSAC-PnP at each offset. Infinite where fewer than
/// [`MIN_RESIDUALS`] residuals are valid.
pub fn static_grid_objective(
    obs: &CornerObservationSequence,
    board_track: &PoseTrack,
    board: &CalibrationBoard,
    intr: &CameraIntrinsics,
    cfg: &SyncSolveConfig,
) -> Result<Vec<(f64, f64)>, CalibError> {
    cfg.validate()?;
    let frames = board_frames(obs, board)?;
    let stride = grid_stride(&frames, cfg);
    Ok(grid_objective(&frames, board_track, intr, cfg, stride))
}

fn grid_objective(
    frames: &[BoardFrame],
    track: &PoseTrack,
    intr: &CameraIntrinsics,
    cfg: &SyncSolveConfig,
    stride: usize,
) -> Vec<(f64, f64)> {
    let min_count = MIN_RESIDUALS.div_ceil(stride).max(4);
    cfg.grid()
        .par_iter()
        .map(|&d| {
            // The full set must hold enough residuals, not only the subsample.
            let valid: usize = frames
                .iter()
                .filter(|f| board_pose(track, f.timestamp + d, cfg.max_track_gap).is_some())
                .map(|f| f.points.len())
                .sum();
            if valid < MIN_RESIDUALS {
                return (d, f64::INFINITY);
            }
            (d, objective_at(frames, track, intr, cfg, d, stride, min_count))
        })
        .collect()
}

/// Residuals of the joint (pose, offset) problem over a fixed sample set.
struct JointProblem<'a> {
    frames: &'a [BoardFrame],
    samples: Vec<SampleRef>,
    track: &'a PoseTrack,
    max_gap: Option<f64>,
    intr: &'a CameraIntrinsics,
}

impl JointProblem<'_> {
    fn world_points(&self, offset: f64) -> Option<Vec<Vector3<f64>>> {
        let mut cache: Option<(usize, RigidTransform)> = None;
        self.samples
            .iter()
            .map(|s| {
                let pose = match cache {
                    Some((f, p)) if f == s.frame => p,
                    _ => {
                        let p = board_pose(self.track, self.frames[s.frame].timestamp + offset, self.max_gap)?;
                        cache = Some((s.frame, p));
                        p
                    }
                };
                Some(pose.apply(&self.frames[s.frame].points[s.corner]))
            })
            .collect()
    }

    fn residuals(&self, pose: &RigidTransform, offset: f64) -> Option<DVector<f64>> {
        let world = self.world_points(offset)?;
        let mut r = DVector::zeros(2 * world.len());
        for (i, (s, x)) in self.samples.iter().zip(&world).enumerate() {
            let p = self.intr.project(&pose.apply(x)).ok()?;
            let e: Vector2<f64> = p - self.frames[s.frame].pixels[s.corner];
            r[2 * i] = e.x;
            r[2 * i + 1] = e.y;
        }
        Some(r)
    }

    /// Jacobian columns: left pose perturbation `[omega, v]`, then offset.
    fn linearize(&self, pose: &RigidTransform, offset: f64) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let world = self.world_points(offset)?;
        let n = world.len();
        let mut r = DVector::zeros(2 * n);
        let mut j = DMatrix::zeros(2 * n, 7);
        for (i, (s, x)) in self.samples.iter().zip(&world).enumerate() {
            let pc = pose.apply(x);
            let (p, jp) = self.intr.project_with_jacobian(&pc).ok()?;
            let e = p - self.frames[s.frame].pixels[s.corner];
            r[2 * i] = e.x;
            r[2 * i + 1] = e.y;
            j.fixed_view_mut::<2, 3>(2 * i, 0).copy_from(&(-(jp * skew(&pc))));
            j.fixed_view_mut::<2, 3>(2 * i, 3).copy_from(&jp);
        }
        let plus = self.residuals(pose, offset + OFFSET_DIFF_STEP)?;
        let minus = self.residuals(pose, offset - OFFSET_DIFF_STEP)?;
        j.set_column(6, &((plus - minus) / (2.0 * OFFSET_DIFF_STEP)));
        Some((r, j))
    }
}

/// Damped Gauss-Newton (Levenberg-Marquardt) over `[omega, v, offset]`.
fn refine_joint(problem: &JointProblem, pose: RigidTransform, offset: f64) -> (RigidTransform, f64, usize) {
    let (mut pose, mut offset) = (pose, offset);
    let Some((mut r, mut j)) = problem.linearize(&pose, offset) else {
        return (pose, offset, 0);
    };
    let mut cost = r.norm_squared();
    let mut lambda = 1e-4;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let h: SMatrix<f64, 7, 7> = (j.transpose() * &j).fixed_view::<7, 7>(0, 0).into_owned();
        let g: SVector<f64, 7> = (j.transpose() * &r).fixed_rows::<7>(0).into_owned();
        let mut accepted = false;
        let mut done = false;
        while lambda < 1e12 {
            let mut damped = h;
            for k in 0..7 {
                damped[(k, k)] += lambda * h[(k, k)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-g))) else {
                lambda *= 10.0;
                continue;
            };
            if step.norm() < 1e-12 {
                done = true;
                break;
            }
            let trial_pose = pose.perturbed(&step.fixed_rows::<6>(0).into_owned());
            let trial_offset = offset + step[6];
            match problem.residuals(&trial_pose, trial_offset) {
                Some(rt) if rt.norm_squared() < cost => match problem.linearize(&trial_pose, trial_offset) {
                    Some((rt, jt)) => {
                        pose = trial_pose;
                        offset = trial_offset;
                        cost = rt.norm_squared();
                        r = rt;
                        j = jt;
                        lambda = (lambda * 0.2).max(1e-12);
                        accepted = true;
                        break;
                    }
                    None => lambda *= 10.0,
                },
                _ => lambda *= 10.0,
            }
        }
        if done || !accepted {
            break;
        }
    }
    (pose, offset, iterations)
}

struct Fit {
    pose: RigidTransform,
    inliers: Vec<SampleRef>,
    residual_count: usize,
    mean_inlier_error: f64,
}

fn classify(
    frames: &[BoardFrame],
    track: &PoseTrack,
    intr: &CameraIntrinsics,
    cfg: &SyncSolveConfig,
    pose: &RigidTransform,
    offset: f64,
) -> Fit {
    let (corr, refs) = correspondences_at(frames, track, offset, cfg.max_track_gap, 1);
    let mut inliers = Vec::new();
    let mut sum = 0.0;
    for (c, s) in corr.iter().zip(&refs) {
        if let Ok(p) = intr.project(&pose.apply(&c.model_point)) {
            let e = (p - c.pixel).norm();
            if e <= cfg.ransac.inlier_threshold {
                inliers.push(*s);
                sum += e;
            }
        }
    }
    let mean_inlier_error = if inliers.is_empty() { f64::INFINITY } else { sum / inliers.len() as f64 };
    Fit { pose: *pose, inliers, residual_count: corr.len(), mean_inlier_error }
}

fn result_from(camera_id: &str, fit: &Fit, offset: f64, fixed: bool, grid_offset: f64, iterations: usize) -> StaticCalibResult {
    StaticCalibResult {
        camera_id: camera_id.to_string(),
        extrinsics: fit.pose,
        clock_offset: offset,
        offset_fixed: fixed,
        inlier_ratio: if fit.residual_count == 0 { 0.0 } else { fit.inliers.len() as f64 / fit.residual_count as f64 },
        mean_reproj_error: fit.mean_inlier_error,
        residual_count: fit.residual_count,
        inlier_count: fit.inliers.len(),
        grid_offset,
        refine_iterations: iterations,
    }
}

/// Solves `T_W^C` and the camera clock offset: grid search over the offset
/// with RANSAC-PnP at each step, then joint refinement of all seven
/// parameters on the inlier set.
pub fn calibrate_static_camera(
    obs: &CornerObservationSequence,
    board_track: &PoseTrack,
    board: &CalibrationBoard,
    intr: &CameraIntrinsics,
    cfg: &SyncSolveConfig,
) -> Result<StaticCalibResult, CalibError> {
    cfg.validate()?;
    intr.validate().map_err(crate::robust::RobustError::from)?;
    let frames = board_frames(obs, board)?;
    let stride = grid_stride(&frames, cfg);
    let objective = grid_objective(&frames, board_track, intr, cfg, stride);
    let (grid, values): (Vec<f64>, Vec<f64>) = objective.into_iter().unzip();
    let best = best_grid_index(&grid, &values).ok_or_else(|| CalibError::NoOverlap {
        camera_id: obs.camera_id.clone(),
        required: MIN_RESIDUALS,
    })?;
    check_identifiability(&obs.camera_id, &values)?;
    let grid_offset = grid[best];

    let (corr, refs) = correspondences_at(&frames, board_track, grid_offset, cfg.max_track_gap, 1);
    let coarse = ransac_pnp(&corr, intr, &cfg.ransac)?;

    // Samples must stay valid while the offset moves within one grid cell.
    let margin = cfg.offset_grid_step + 2.0 * OFFSET_DIFF_STEP;
    let usable = |s: &SampleRef| {
        let t = frames[s.frame].timestamp + grid_offset;
        [t - margin, t, t + margin].iter().all(|&t| board_pose(board_track, t, cfg.max_track_gap).is_some())
    };
    let mut inliers: Vec<SampleRef> = coarse.inlier_indices().into_iter().map(|i| refs[i]).filter(usable).collect();
    let (mut pose, mut offset) = (coarse.model, grid_offset);
    let mut total_iterations = 0;
    let mut fit = None;
    for _ in 0..3 {
        if inliers.len() < 4 {
            return Err(crate::robust::RobustError::NotEnoughInliers { found: inliers.len(), required: 4 }.into());
        }
        let problem = JointProblem { frames: &frames, samples: inliers.clone(), track: board_track, max_gap: cfg.max_track_gap, intr };
        let (p, o, it) = refine_joint(&problem, pose, offset);
        pose = p;
        offset = o;
        total_iterations += it;
        let f = classify(&frames, board_track, intr, cfg, &pose, offset);
        let next: Vec<SampleRef> = f.inliers.iter().copied().filter(usable).collect();
        let unchanged = next.len() == inliers.len()
            && next.iter().zip(&inliers).all(|(a, b)| a.frame == b.frame && a.corner == b.corner);
        inliers = next;
        fit = Some(f);
        if unchanged {
            break;
        }
    }
    let fit = fit.expect("at least one refinement round");
    Ok(result_from(&obs.camera_id, &fit, offset, false, grid_offset, total_iterations))
}

/// Solves `T_W^C` with the clock offset held at `offset` (sync-group members).
pub fn calibrate_static_camera_fixed_offset(
    obs: &CornerObservationSequence,
    board_track: &PoseTrack,
    board: &CalibrationBoard,
    intr: &CameraIntrinsics,
    cfg: &SyncSolveConfig,
    offset: f64,
) -> Result<StaticCalibResult, CalibError> {
    cfg.validate()?;
    let frames = board_frames(obs, board)?;
    let (corr, _) = correspondences_at(&frames, board_track, offset, cfg.max_track_gap, 1);
    if corr.len() < MIN_RESIDUALS {
        return Err(CalibError::NoOverlap { camera_id: obs.camera_id.clone(), required: MIN_RESIDUALS });
    }
    let coarse = ransac_pnp(&corr, intr, &cfg.ransac)?;
    let mut pose = coarse.model;
    let mut inlier_idx = coarse.inlier_indices();
    let mut iterations = 0;
    for _ in 0..3 {
        let subset: Vec<_> = inlier_idx.iter().map(|&i| corr[i]).collect();
        let refined = refine_pose_reprojection(&pose, &subset, intr)?;
        pose = refined.pose;
        iterations += refined.iterations;
        let next: Vec<usize> = (0..corr.len())
            .filter(|&i| {
                intr.project(&pose.apply(&corr[i].model_point))
                    .is_ok_and(|p| (p - corr[i].pixel).norm() <= cfg.ransac.inlier_threshold)
            })
            .collect();
        if next == inlier_idx {
            break;
        }
        inlier_idx = next;
    }
    let fit = classify(&frames, board_track, intr, cfg, &pose, offset);
    Ok(result_from(&obs.camera_id, &fit, offset, true, offset, iterations))
}
