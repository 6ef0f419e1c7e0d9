use nalgebra::{Matrix3, Vector3};

use super::{Correspondence3D3D, RobustError};
use crate::geometry::RigidTransform;

/// Relative singular-value floor below which a centered point set counts as rank deficient.
const RANK_TOL: f64 = 1e-10;

fn check_rank(points: &[Vector3<f64>], weights: &[f64], centroid: &Vector3<f64>, what: &str) -> Result<(), RobustError> {
    let mut cov = Matrix3::zeros();
    for (p, w) in points.iter().zip(weights) {
        let d = p - centroid;
        cov += *w * d * d.transpose();
    }
    let sv = cov.singular_values();
    let mut s: Vec<f64> = sv.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    if s[0] <= 0.0 || s[1] <= RANK_TOL * s[0] {
        return Err(RobustError::Degenerate(format!("{what} points span fewer than 2 dimensions")));
    }
    Ok(())
}

/// Weighted least-squares rigid transform mapping `model` points onto `world` points.
pub fn kabsch_points(model: &[Vector3<f64>], world: &[Vector3<f64>], weights: &[f64]) -> Result<RigidTransform, RobustError> {
    assert_eq!(model.len(), world.len());
    assert_eq!(model.len(), weights.len());
    if model.len() < 3 {
        return Err(RobustError::Degenerate(format!("{} correspondences, need >= 3", model.len())));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(RobustError::InvalidParams("weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(RobustError::Degenerate("all weights are zero".into()));
    }
    let cm = model.iter().zip(weights).map(|(p, w)| *w * p).sum::<Vector3<f64>>() / total;
    let cw = world.iter().zip(weights).map(|(p, w)| *w * p).sum::<Vector3<f64>>() / total;
    check_rank(model, weights, &cm, "model")?;
    check_rank(world, weights, &cw, "world")?;

    let mut h = Matrix3::zeros();
    for ((m, p), w) in model.iter().zip(world).zip(weights) {
        h += (*w / total) * (m - cm) * (p - cw).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.ok_or_else(|| RobustError::Degenerate("SVD failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| RobustError::Degenerate("SVD failed".into()))?;
    let v = v_t.transpose();
    // Reflection correction.
    let d = (v * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = v * correction * u.transpose();
    let t = cw - r * cm;
    Ok(RigidTransform::from_matrix_parts(&r, t))
}

/// Weighted Kabsch over 3D-3D correspondences: returns `T` with `T * model ~ world`.
pub fn kabsch(corr: &[Correspondence3D3D]) -> Result<RigidTransform, RobustError> {
    let model: Vec<_> = corr.iter().map(|c| c.model_point).collect();
    let world: Vec<_> = corr.iter().map(|c| c.world_point).collect();
    let weights: Vec<_> = corr.iter().map(|c| c.weight).collect();
    kabsch_points(&model, &world, &weights)
}
