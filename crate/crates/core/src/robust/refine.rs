use nalgebra::{DMatrix, DVector, Matrix6, Vector6};

use super::{Correspondence2D3D, RobustError};
use crate::geometry::{skew, CameraIntrinsics, RigidTransform};

const MAX_ITERATIONS: usize = 100;
const STEP_TOLERANCE: f64 = 1e-10;

/// Correspondences of one camera, observing the object through `extrinsics` (`T_W^C`).
#[derive(Debug, Clone, Copy)]
pub struct ViewObservations<'a> {
    pub extrinsics: RigidTransform,
    pub intrinsics: &'a CameraIntrinsics,
    pub correspondences: &'a [Correspondence2D3D],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refinement {
    pub pose: RigidTransform,
    /// False when the iteration cap was hit.
    pub converged: bool,
    pub iterations: usize,
    pub initial_rms: f64,
    pub final_rms: f64,
}

/// Weighted residuals `sqrt(w) * (pi(T_c * pose * X) - x)` stacked per
/// correspondence, or `None` if any point falls behind its camera.
pub fn reprojection_residuals(pose: &RigidTransform, views: &[ViewObservations]) -> Option<DVector<f64>> {
    let n: usize = views.iter().map(|v| v.correspondences.len()).sum();
    let mut r = DVector::zeros(2 * n);
    let mut row = 0;
    for view in views {
        let chain = view.extrinsics.compose(pose);
        for c in view.correspondences {
            let p = view.intrinsics.project(&chain.apply(&c.model_point)).ok()?;
            let e = (p - c.pixel) * c.weight.sqrt();
            r[row] = e.x;
            r[row + 1] = e.y;
            row += 2;
        }
    }
    Some(r)
}

/// Residuals and their Jacobian with respect to a left perturbation
/// `exp([omega, v]) * pose` (rotation first, then translation).
pub fn residuals_and_jacobian(pose: &RigidTransform, views: &[ViewObservations]) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let n: usize = views.iter().map(|v| v.correspondences.len()).sum();
    let mut r = DVector::zeros(2 * n);
    let mut j = DMatrix::zeros(2 * n, 6);
    let mut row = 0;
    for view in views {
        let rc = view.extrinsics.rotation_matrix();
        for c in view.correspondences {
            let pw = pose.apply(&c.model_point);
            let pc = view.extrinsics.apply(&pw);
            let (p, jp) = view.intrinsics.project_with_jacobian(&pc).ok()?;
            let sw = c.weight.sqrt();
            let e = (p - c.pixel) * sw;
            r[row] = e.x;
            r[row + 1] = e.y;
            let jr = jp * rc * sw;
            let jrot = -(jr * skew(&pw));
            j.fixed_view_mut::<2, 3>(row, 0).copy_from(&jrot);
            j.fixed_view_mut::<2, 3>(row, 3).copy_from(&jr);
            row += 2;
        }
    }
    Some((r, j))
}

fn total_weight(views: &[ViewObservations]) -> f64 {
    views.iter().flat_map(|v| v.correspondences).map(|c| c.weight).sum()
}

/// Weighted reprojection RMS in pixels; infinite if any point is behind its camera.
pub fn reprojection_rms(pose: &RigidTransform, views: &[ViewObservations]) -> f64 {
    let w = total_weight(views);
    match reprojection_residuals(pose, views) {
        Some(r) if w > 0.0 => (r.norm_squared() / w).sqrt(),
        Some(_) => 0.0,
        None => f64::INFINITY,
    }
}

/// Levenberg-Marquardt refinement of an object pose `T_O^W` against the
/// reprojection error in several calibrated views. Steps that increase the
/// cost are rejected, so the RMS never grows.
pub fn refine_pose_multiview(initial: &RigidTransform, views: &[ViewObservations]) -> Result<Refinement, RobustError> {
    let n: usize = views.iter().map(|v| v.correspondences.len()).sum();
    if n < 4 {
        return Err(RobustError::NotEnoughInliers { found: n, required: 4 });
    }
    if total_weight(views) <= 0.0 {
        return Err(RobustError::Degenerate("all correspondence weights are zero".into()));
    }
    let initial_rms = reprojection_rms(initial, views);
    if !initial_rms.is_finite() {
        return Err(RobustError::Degenerate("initial pose puts points behind a camera".into()));
    }
    let mut pose = *initial;
    let mut lambda = 1e-4;
    let mut iterations = 0;
    let mut converged = false;
    let (mut r, mut j) = residuals_and_jacobian(&pose, views).expect("initial pose is valid");
    let mut cost = r.norm_squared();
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let h: Matrix6<f64> = (j.transpose() * &j).fixed_view::<6, 6>(0, 0).into_owned();
        let g: Vector6<f64> = (j.transpose() * &r).fixed_rows::<6>(0).into_owned();
        let mut accepted = false;
        while lambda < 1e12 {
            let mut damped = h;
            for k in 0..6 {
                damped[(k, k)] += lambda * h[(k, k)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-g))) else {
                lambda *= 10.0;
                continue;
            };
            if step.norm() < STEP_TOLERANCE {
                converged = true;
                break;
            }
            let trial = pose.perturbed(&step);
            match residuals_and_jacobian(&trial, views) {
                Some((rt, jt)) if rt.norm_squared() < cost => {
                    pose = trial;
                    cost = rt.norm_squared();
                    r = rt;
                    j = jt;
                    lambda = (lambda * 0.2).max(1e-12);
                    accepted = true;
                    break;
                }
                _ => lambda *= 10.0,
            }
        }
        if converged {
            break;
        }
        if !accepted {
            // No descent direction left at any damping: local minimum.
            converged = true;
            break;
        }
    }
    Ok(Refinement {
        pose,
        converged,
        iterations,
        initial_rms,
        final_rms: reprojection_rms(&pose, views),
    })
}

/// Single-camera refinement of a model-to-camera pose.
pub fn refine_pose_reprojection(
    initial: &RigidTransform,
    corr: &[Correspondence2D3D],
    intr: &CameraIntrinsics,
) -> Result<Refinement, RobustError> {
    refine_pose_multiview(
        initial,
        &[ViewObservations {
            extrinsics: RigidTransform::identity(),
            intrinsics: intr,
            correspondences: corr,
        }],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{compose, invert, Distortion};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, n: usize) -> (RigidTransform, Vec<Correspondence2D3D>, CameraIntrinsics) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let intr = CameraIntrinsics::pinhole(800.0, 800.0, 640.0, 480.0, 1280, 960);
        let truth = RigidTransform::from_axis_angle(
            Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            Vector3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(700.0..1000.0)),
        );
        let corr = (0..n)
            .map(|_| {
                let m = Vector3::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
                Correspondence2D3D::weighted(intr.project(&truth.apply(&m)).unwrap(), m, rng.random_range(0.5..1.5))
            })
            .collect();
        (truth, corr, intr)
    }

    #[test]
    fn ground_truth_is_a_fixed_point() {
        let (truth, corr, intr) = setup(1, 50);
        let out = refine_pose_reprojection(&truth, &corr, &intr).unwrap();
        assert!(out.converged);
        assert!(compose(&out.pose, &invert(&truth)).rotation_angle() < 1e-12);
        assert!((out.pose.translation() - truth.translation()).norm() < 1e-9);
    }

    #[test]
    fn converges_from_perturbed_start() {
        for seed in 0..10 {
            let (truth, corr, intr) = setup(seed, 50);
            let axis = Vector3::new(0.3, -0.5, 0.8).normalize();
            let start = RigidTransform::from_axis_angle(axis * 2f64.to_radians(), Vector3::new(3.0, -4.0, 0.0))
                .compose(&truth);
            let out = refine_pose_reprojection(&start, &corr, &intr).unwrap();
            assert!(out.converged);
            assert!(out.final_rms <= out.initial_rms);
            assert!(compose(&out.pose, &invert(&truth)).rotation_angle() < 1e-6);
            assert!((out.pose.translation() - truth.translation()).norm() < 1e-6);
        }
    }

    #[test]
    fn analytic_jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..20 {
            let (truth, corr, mut intr) = setup(100 + seed, 8);
            intr.distortion = Distortion { k1: -0.1, k2: 0.02, k3: 0.0, p1: 5e-4, p2: -3e-4 };
            let pose = RigidTransform::from_axis_angle(
                Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)),
                Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)),
            )
            .compose(&truth);
            let extr = RigidTransform::from_axis_angle(Vector3::new(0.01, 0.02, -0.01), Vector3::new(1.0, 2.0, 3.0));
            let views = [ViewObservations { extrinsics: extr, intrinsics: &intr, correspondences: &corr }];
            let (_, j) = residuals_and_jacobian(&pose, &views).unwrap();
            for k in 0..6 {
                let h = if k < 3 { 1e-6 } else { 1e-4 };
                let mut d = Vector6::zeros();
                d[k] = h;
                let plus = reprojection_residuals(&pose.perturbed(&d), &views).unwrap();
                let minus = reprojection_residuals(&pose.perturbed(&(-d)), &views).unwrap();
                let fd = (plus - minus) / (2.0 * h);
                let col = j.column(k);
                let rel = (&fd - col).norm() / col.norm().max(1e-12);
                assert!(rel < 1e-5, "column {k}: relative error {rel}");
            }
        }
    }

    #[test]
    fn too_few_points() {
        let (truth, corr, intr) = setup(3, 3);
        assert!(matches!(
            refine_pose_reprojection(&truth, &corr, &intr),
            Err(RobustError::NotEnoughInliers { found: 3, required: 4 })
        ));
    }
}
