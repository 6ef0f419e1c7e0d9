use std::collections::HashMap;

use nalgebra::{Matrix3, Vector3};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{score_hypothesis, CorrespondenceDistribution, MvPoseError, ObjectModel, PoseEstimate, PoseStatus};
use crate::geometry::{skew, CameraModel};
use crate::robust::{
    ransac_kabsch, refine_pose_multiview, Correspondence2D3D, Correspondence3D3D, RansacParams, ViewObservations,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultiViewParams {
    /// Pair draws, split evenly over the unordered view pairs.
    pub pair_samples: usize,
    /// Sampson distance bound, px.
    pub epipolar_threshold: f64,
    pub min_3d_correspondences: usize,
    /// Samples match across views when their model points are this close, mm.
    pub model_tolerance: f64,
    /// RANSAC + Kabsch settings; the threshold is in mm.
    pub ransac: RansacParams,
    /// Final multi-view reprojection refinement.
    pub refine: bool,
    /// Samples within this reprojection error (px) enter the refinement.
    pub reprojection_threshold: f64,
}

impl Default for MultiViewParams {
    fn default() -> Self {
        Self {
            pair_samples: 20_000,
            epipolar_threshold: 2.0,
            min_3d_correspondences: 3,
            model_tolerance: 1.0,
            ransac: RansacParams::with_threshold(5.0),
            refine: true,
            reprojection_threshold: 3.0,
        }
    }
}

impl MultiViewParams {
    pub fn validate(&self) -> Result<(), MvPoseError> {
        if self.pair_samples < 1 {
            return Err(MvPoseError::InvalidParams("pair_samples must be >= 1".into()));
        }
        if self.min_3d_correspondences < 3 {
            return Err(MvPoseError::InvalidParams("min_3d_correspondences must be >= 3".into()));
        }
        if !(self.epipolar_threshold > 0.0 && self.model_tolerance >= 0.0 && self.reprojection_threshold > 0.0) {
            return Err(MvPoseError::InvalidParams("thresholds must be positive".into()));
        }
        self.ransac.validate()?;
        Ok(())
    }
}

/// Draw bookkeeping of [`build_3d3d`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairStatistics {
    pub draws: usize,
    /// Draws whose second view had a sample on the same model point.
    pub matched: usize,
    pub accepted: usize,
}

/// Sampson distance (px) of a pixel pair under the cameras' epipolar geometry.
fn sampson_distance(c_i: &Correspondence2D3D, c_j: &Correspondence2D3D, cam_i: &CameraModel, cam_j: &CameraModel) -> f64 {
    let rel = cam_j.extrinsics.compose(&cam_i.extrinsics.inverse());
    let essential = skew(rel.translation()) * rel.rotation_matrix();
    let ki = cam_i.intrinsics.matrix().try_inverse().unwrap_or_else(Matrix3::identity);
    let kj = cam_j.intrinsics.matrix().try_inverse().unwrap_or_else(Matrix3::identity);
    let f = kj.transpose() * essential * ki;
    let ui = cam_i.intrinsics.undistort_pixel(&c_i.pixel);
    let uj = cam_j.intrinsics.undistort_pixel(&c_j.pixel);
    let xi = Vector3::new(ui.x, ui.y, 1.0);
    let xj = Vector3::new(uj.x, uj.y, 1.0);
    let fx = f * xi;
    let ftx = f.transpose() * xj;
    let num = xj.dot(&fx);
    let den = fx.x * fx.x + fx.y * fx.y + ftx.x * ftx.x + ftx.y * ftx.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    (num * num / den).sqrt()
}

/// Midpoint triangulation of one pixel pair, or `None` if the pair violates
/// the epipolar bound, the rays are parallel, or the point is behind a camera.
pub fn triangulate_pair(
    c_i: &Correspondence2D3D,
    c_j: &Correspondence2D3D,
    cam_i: &CameraModel,
    cam_j: &CameraModel,
    epipolar_threshold: f64,
) -> Option<Vector3<f64>> {
    if !(sampson_distance(c_i, c_j, cam_i, cam_j) <= epipolar_threshold) {
        return None;
    }
    let (oi, oj) = (cam_i.center(), cam_j.center());
    let (di, dj) = (cam_i.world_ray(&c_i.pixel).normalize(), cam_j.world_ray(&c_j.pixel).normalize());
    let w0 = oi - oj;
    let b = di.dot(&dj);
    let (d, e) = (di.dot(&w0), dj.dot(&w0));
    let denom = 1.0 - b * b;
    if denom < 1e-12 {
        return None;
    }
    let s = (b * e - d) / denom;
    let t = (e - b * d) / denom;
    let x = 0.5 * ((oi + s * di) + (oj + t * dj));
    (cam_i.to_camera(&x).z > 0.0 && cam_j.to_camera(&x).z > 0.0).then_some(x)
}

/// Views paired with their (possibly per-frame) cameras, sorted by camera id.
fn resolve_views<'a>(
    dists: &'a [CorrespondenceDistribution],
    cams: &[CameraModel],
) -> Result<Vec<(&'a CorrespondenceDistribution, CameraModel)>, MvPoseError> {
    let mut views = Vec::with_capacity(dists.len());
    for d in dists {
        let mut cam = cams.iter().find(|c| c.id == d.camera_id).cloned().ok_or_else(|| MvPoseError::UnknownCamera(d.camera_id.clone()))?;
        if let Some(pose) = d.camera_pose {
            cam.extrinsics = pose;
        }
        views.push((d, cam));
    }
    views.sort_by(|a, b| a.1.id.cmp(&b.1.id));
    if let Some(w) = views.windows(2).find(|w| w[0].1.id == w[1].1.id) {
        return Err(MvPoseError::DuplicateView(w[0].1.id.clone()));
    }
    if views.len() < 2 {
        return Err(MvPoseError::NotEnoughViews { found: views.len() });
    }
    Ok(views)
}

/// Spatial hash of a view's sample model points for tolerance lookups.
struct ModelIndex {
    cell: f64,
    buckets: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl ModelIndex {
    fn new(samples: &[Correspondence2D3D], tolerance: f64) -> Self {
        let cell = tolerance.max(1e-6);
        let mut buckets: HashMap<_, Vec<usize>> = HashMap::new();
        for (i, s) in samples.iter().enumerate() {
            buckets.entry(Self::key(&s.model_point, cell)).or_default().push(i);
        }
        Self { cell, buckets }
    }

    fn key(p: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
        ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64)
    }

    fn matches(&self, samples: &[Correspondence2D3D], p: &Vector3<f64>, tolerance: f64) -> Vec<usize> {
        let (kx, ky, kz) = Self::key(p, self.cell);
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(b) = self.buckets.get(&(kx + dx, ky + dy, kz + dz)) {
                        out.extend(b.iter().copied().filter(|&i| (samples[i].model_point - p).norm() <= tolerance));
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Stable 64-bit FNV-1a, used to derive per-pair seeds from camera ids.
fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    bytes.into_iter().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn pair_seed(seed: u64, a: &str, b: &str) -> u64 {
    seed ^ fnv1a(a.bytes().chain([0u8]).chain(b.bytes()))
}

type View<'a> = (&'a CorrespondenceDistribution, CameraModel);

fn sample_pair(views: &[View], indexes: &[ModelIndex], i: usize, j: usize, budget: usize, params: &MultiViewParams) -> (Vec<Correspondence3D3D>, PairStatistics) {
    let mut stats = PairStatistics { draws: budget, ..Default::default() };
    let mut out = Vec::new();
    let weights = |v: usize| WeightedIndex::new(views[v].0.samples.iter().map(|s| s.weight)).ok();
    let (Some(wi), Some(wj)) = (weights(i), weights(j)) else {
        return (out, stats);
    };
    let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(params.ransac.seed, &views[i].1.id, &views[j].1.id));
    for _ in 0..budget {
        let (first, second, dist) = if rng.random_bool(0.5) { (i, j, &wi) } else { (j, i, &wj) };
        let a = &views[first].0.samples[dist.sample(&mut rng)];
        let candidates = indexes[second].matches(&views[second].0.samples, &a.model_point, params.model_tolerance);
        let second_samples = &views[second].0.samples;
        let Ok(pick) = WeightedIndex::new(candidates.iter().map(|&k| second_samples[k].weight)) else {
            continue;
        };
        stats.matched += 1;
        let b = &second_samples[candidates[pick.sample(&mut rng)]];
        if let Some(x) = triangulate_pair(a, b, &views[first].1, &views[second].1, params.epipolar_threshold) {
            stats.accepted += 1;
            out.push(Correspondence3D3D { world_point: x, model_point: 0.5 * (a.model_point + b.model_point), weight: a.weight * b.weight });
        }
    }
    (out, stats)
}

fn build_sorted(views: &[View], params: &MultiViewParams) -> (Vec<Correspondence3D3D>, PairStatistics) {
    let indexes: Vec<ModelIndex> = views.iter().map(|(d, _)| ModelIndex::new(&d.samples, params.model_tolerance)).collect();
    let pairs: Vec<(usize, usize)> = (0..views.len()).flat_map(|i| (i + 1..views.len()).map(move |j| (i, j))).collect();
    let (base, extra) = (params.pair_samples / pairs.len(), params.pair_samples % pairs.len());
    let per_pair: Vec<_> = pairs
        .par_iter()
        .enumerate()
        .map(|(k, &(i, j))| sample_pair(views, &indexes, i, j, base + (k < extra) as usize, params))
        .collect();
    let mut all = Vec::new();
    let mut stats = PairStatistics::default();
    for (c, s) in per_pair {
        all.extend(c);
        stats.draws += s.draws;
        stats.matched += s.matched;
        stats.accepted += s.accepted;
    }
    (all, stats)
}

/// World-frame 3D-3D correspondences from pairwise triangulation. Draws are
/// stratified over unordered view pairs (ordered by camera id) with a
/// per-pair seed, so the result does not depend on the input view order.
pub fn build_3d3d(
    dists: &[CorrespondenceDistribution],
    cams: &[CameraModel],
    params: &MultiViewParams,
) -> Result<(Vec<Correspondence3D3D>, PairStatistics), MvPoseError> {
    params.validate()?;
    let views = resolve_views(dists, cams)?;
    let (corr, stats) = build_sorted(&views, params);
    if corr.len() < params.min_3d_correspondences {
        return Err(MvPoseError::FailedTriangulation { accepted: corr.len(), required: params.min_3d_correspondences });
    }
    Ok((corr, stats))
}

/// World-frame pose `T_O^W` from two or more calibrated views.
pub fn estimate_multi_view(
    dists: &[CorrespondenceDistribution],
    cams: &[CameraModel],
    params: &MultiViewParams,
    model: &ObjectModel,
) -> Result<PoseEstimate, MvPoseError> {
    params.validate()?;
    let views = resolve_views(dists, cams)?;
    let ids: Vec<String> = views.iter().map(|v| v.1.id.clone()).collect();
    let (corr, _) = build_sorted(&views, params);
    if corr.len() < params.min_3d_correspondences {
        let mut est = PoseEstimate::failed(PoseStatus::FailedTriangulation, ids);
        est.correspondences_3d = corr.len();
        return Ok(est);
    }
    let outcome = match ransac_kabsch(&corr, &params.ransac) {
        Ok(o) => o,
        Err(_) => {
            let mut est = PoseEstimate::failed(PoseStatus::NotEnoughInliers, ids);
            est.correspondences_3d = corr.len();
            return Ok(est);
        }
    };
    let mut pose = outcome.model;
    if params.refine {
        let support: Vec<Vec<Correspondence2D3D>> = views
            .iter()
            .map(|(d, cam)| {
                let chain = cam.extrinsics.compose(&pose);
                d.samples
                    .iter()
                    .filter(|c| {
                        cam.intrinsics.project(&chain.apply(&c.model_point)).is_ok_and(|p| (p - c.pixel).norm() <= params.reprojection_threshold)
                    })
                    .copied()
                    .collect()
            })
            .collect();
        let obs: Vec<ViewObservations> = views
            .iter()
            .zip(&support)
            .map(|((_, cam), s)| ViewObservations { extrinsics: cam.extrinsics, intrinsics: &cam.intrinsics, correspondences: s })
            .collect();
        if let Ok(r) = refine_pose_multiview(&pose, &obs) {
            pose = r.pose;
        }
    }
    let score = views
        .iter()
        .map(|(d, cam)| score_hypothesis(&cam.extrinsics.compose(&pose), d, &cam.intrinsics, model, params.reprojection_threshold))
        .sum::<f64>()
        / views.len() as f64;
    Ok(PoseEstimate {
        pose: Some(pose),
        score,
        inlier_count: outcome.inlier_count,
        status: PoseStatus::Ok,
        views_used: ids,
        correspondences_3d: corr.len(),
    })
}
