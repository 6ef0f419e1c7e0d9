use super::{rasterize_silhouette, CorrespondenceDistribution, ObjectModel, PoseEstimate, PoseStatus};
use crate::geometry::{CameraIntrinsics, RigidTransform};
use crate::robust::{refine_pose_reprojection, run_lo_ransac, Correspondence2D3D, PnpProblem, RansacParams};

/// Hypotheses re-ranked by [`score_hypothesis`] after RANSAC.
pub const RESCORE_TOP_K: usize = 16;

/// Agreement of a camera-frame pose hypothesis with a distribution: IoU of
/// the projected model silhouette with the predicted mask, plus the
/// weighted mean of `exp(-e^2 / 2 sigma^2)` over sample reprojection errors.
/// Each term lies in `[0, 1]`.
pub fn score_hypothesis(
    pose: &RigidTransform,
    dist: &CorrespondenceDistribution,
    intr: &CameraIntrinsics,
    model: &ObjectModel,
    sigma: f64,
) -> f64 {
    let projected: Vec<_> = model.surface_points.iter().filter_map(|p| intr.project(&pose.apply(p)).ok()).collect();
    let silhouette = rasterize_silhouette(&projected, &dist.patch, dist.mask.cell);
    let mask_term = silhouette.iou(&dist.mask);

    let total = dist.total_weight();
    let corr_term = if total > 0.0 {
        let s2 = 2.0 * sigma * sigma;
        dist.samples
            .iter()
            .map(|c| {
                let agree = intr
                    .project(&pose.apply(&c.model_point))
                    .map(|p| (-(p - c.pixel).norm_squared() / s2).exp())
                    .unwrap_or(0.0);
                c.weight * agree
            })
            .sum::<f64>()
            / total
    } else {
        0.0
    };
    mask_term + corr_term
}

fn inliers(pose: &RigidTransform, samples: &[Correspondence2D3D], intr: &CameraIntrinsics, threshold: f64) -> Vec<Correspondence2D3D> {
    samples
        .iter()
        .filter(|c| intr.project(&pose.apply(&c.model_point)).is_ok_and(|p| (p - c.pixel).norm() <= threshold))
        .copied()
        .collect()
}

/// Camera-frame pose `T_O^C` from one view: weighted RANSAC-PnP, rescoring
/// of the best hypotheses, and reprojection refinement of the winner.
pub fn estimate_single_view(
    dist: &CorrespondenceDistribution,
    intr: &CameraIntrinsics,
    params: &RansacParams,
    model: &ObjectModel,
) -> PoseEstimate {
    let views = vec![dist.camera_id.clone()];
    let outcome = match run_lo_ransac(&PnpProblem::new(&dist.samples, intr), params, RESCORE_TOP_K) {
        Ok(o) => o,
        Err(_) => return PoseEstimate::failed(PoseStatus::NotEnoughInliers, views),
    };
    let theta = params.inlier_threshold;
    let candidates = std::iter::once(outcome.model).chain(outcome.top_hypotheses.iter().map(|h| h.model));
    let mut best: Option<(f64, RigidTransform)> = None;
    for pose in candidates {
        let s = score_hypothesis(&pose, dist, intr, model, theta);
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, pose));
        }
    }
    let (_, mut pose) = best.expect("at least the consensus model");
    let mut support = inliers(&pose, &dist.samples, intr, theta);
    if support.len() >= 4 {
        if let Ok(r) = refine_pose_reprojection(&pose, &support, intr) {
            pose = r.pose;
            support = inliers(&pose, &dist.samples, intr, theta);
        }
    }
    if support.len() < 4 {
        return PoseEstimate::failed(PoseStatus::NotEnoughInliers, views);
    }
    PoseEstimate {
        pose: Some(pose),
        score: score_hypothesis(&pose, dist, intr, model, theta),
        inlier_count: support.len(),
        status: PoseStatus::Ok,
        views_used: views,
        correspondences_3d: 0,
    }
}
