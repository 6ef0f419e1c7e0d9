//! Perspective-three-point solver.
//!
//! With depths `s1, s2, s3` along the unit bearings and `u = s2/s1`,
//! `v = s3/s1`, the law of cosines gives two monic quadratics in `u` whose
//! coefficients are polynomials in `v`. Their resultant is a quartic in `v`;
//! each admissible real root yields one depth triple, and the pose follows
//! from aligning the model triangle with the back-projected one.

use nalgebra::{DMatrix, Vector3};

use super::{kabsch_points, Correspondence2D3D, RobustError};
use crate::geometry::{CameraIntrinsics, RigidTransform};

/// Maximum reprojection error (px) of an accepted solution on its own three points.
const SELF_CONSISTENCY_PX: f64 = 1e-6;

type Poly = Vec<f64>;

fn poly_mul(a: &[f64], b: &[f64]) -> Poly {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_add(a: &[f64], b: &[f64], sign: f64) -> Poly {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| a.get(i).copied().unwrap_or(0.0) + sign * b.get(i).copied().unwrap_or(0.0))
        .collect()
}

fn poly_eval(p: &[f64], x: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

fn poly_deriv(p: &[f64]) -> Poly {
    p.iter().enumerate().skip(1).map(|(i, c)| i as f64 * c).collect()
}

/// Real roots of a polynomial (coefficients low to high) via companion-matrix
/// eigenvalues, polished by Newton steps.
fn real_roots(p: &[f64]) -> Vec<f64> {
    let scale = p.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let mut coeffs: Vec<f64> = p.iter().map(|c| c / scale).collect();
    while coeffs.len() > 1 && coeffs.last().is_some_and(|c| c.abs() < 1e-14) {
        coeffs.pop();
    }
    let degree = coeffs.len() - 1;
    if degree == 0 {
        return Vec::new();
    }
    let lead = coeffs[degree];
    let mut companion = DMatrix::zeros(degree, degree);
    for i in 1..degree {
        companion[(i, i - 1)] = 1.0;
    }
    for i in 0..degree {
        companion[(i, degree - 1)] = -coeffs[i] / lead;
    }
    let deriv = poly_deriv(&coeffs);
    companion
        .complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
        .map(|z| {
            let mut x = z.re;
            for _ in 0..8 {
                let d = poly_eval(&deriv, x);
                if d == 0.0 {
                    break;
                }
                let step = poly_eval(&coeffs, x) / d;
                x -= step;
                if step.abs() < 1e-15 * (1.0 + x.abs()) {
                    break;
                }
            }
            x
        })
        .collect()
}

/// Gauss-Newton polish of a depth triple on the three distance constraints.
fn polish_depths(mut s: Vector3<f64>, cos: [f64; 3], dist2: [f64; 3]) -> Vector3<f64> {
    // (i, j, cos_ij, d_ij^2) for the pairs (1,2), (1,3), (2,3).
    let pairs = [(0, 1, cos[2], dist2[2]), (0, 2, cos[1], dist2[1]), (1, 2, cos[0], dist2[0])];
    let residual = |s: &Vector3<f64>| {
        Vector3::from_iterator(pairs.iter().map(|&(i, j, c, d)| s[i] * s[i] + s[j] * s[j] - 2.0 * c * s[i] * s[j] - d))
    };
    let mut r = residual(&s);
    for _ in 0..10 {
        let mut jac = nalgebra::Matrix3::zeros();
        for (row, &(i, j, c, _)) in pairs.iter().enumerate() {
            jac[(row, i)] = 2.0 * s[i] - 2.0 * c * s[j];
            jac[(row, j)] = 2.0 * s[j] - 2.0 * c * s[i];
        }
        let Some(inv) = jac.try_inverse() else { break };
        let candidate = s - inv * r;
        let rc = residual(&candidate);
        if rc.norm() >= r.norm() {
            break;
        }
        s = candidate;
        r = rc;
    }
    s
}

/// Returns up to four poses `T` (model to camera) consistent with exactly three
/// 2D-3D correspondences.
pub fn solve_p3p(corr: &[Correspondence2D3D; 3], intr: &CameraIntrinsics) -> Result<Vec<RigidTransform>, RobustError> {
    let x = [corr[0].model_point, corr[1].model_point, corr[2].model_point];
    let scale = (x[0] - x[1]).norm().max((x[0] - x[2]).norm()).max((x[1] - x[2]).norm());
    let area2 = (x[1] - x[0]).cross(&(x[2] - x[0])).norm();
    if scale <= 0.0 || area2 <= 1e-9 * scale * scale {
        return Err(RobustError::Degenerate("collinear model points".into()));
    }
    let f = [intr.bearing(&corr[0].pixel), intr.bearing(&corr[1].pixel), intr.bearing(&corr[2].pixel)];
    let a2 = (x[1] - x[2]).norm_squared();
    let b2 = (x[0] - x[2]).norm_squared();
    let c2 = (x[0] - x[1]).norm_squared();
    let cos_a = f[1].dot(&f[2]);
    let cos_b = f[0].dot(&f[2]);
    let cos_g = f[0].dot(&f[1]);

    // Quadratics in u: u^2 + p1 u + p0 = 0 and u^2 + q1 u + q0 = 0, coefficients in v.
    let p1: Poly = vec![-2.0 * cos_g];
    let q1: Poly = vec![0.0, -2.0 * cos_a];
    let p0: Poly = vec![1.0 - c2 / b2, 2.0 * c2 * cos_b / b2, -c2 / b2];
    let q0: Poly = vec![-a2 / b2, 2.0 * a2 * cos_b / b2, 1.0 - a2 / b2];
    let dp = poly_add(&p0, &q0, -1.0);
    let d1 = poly_add(&p1, &q1, -1.0);
    let cross = poly_add(&poly_mul(&p1, &q0), &poly_mul(&p0, &q1), -1.0);
    let quartic = poly_add(&poly_mul(&dp, &dp), &poly_mul(&d1, &cross), 1.0);

    let mut solutions: Vec<RigidTransform> = Vec::new();
    for v in real_roots(&quartic) {
        if !(v > 0.0) {
            continue;
        }
        let denom = poly_eval(&d1, v);
        // Near double roots the linear elimination loses accuracy, so the roots
        // of the first quadratic are tried as well; the depth polish and the
        // self-consistency check discard spurious candidates.
        let mut u_candidates = real_roots(&[poly_eval(&p0, v), p1[0], 1.0]);
        if denom.abs() > 1e-12 {
            u_candidates.push(-poly_eval(&dp, v) / denom);
        }
        for u in u_candidates {
            if let Some(pose) = pose_from_ratios(u, v, &x, &f, [cos_a, cos_b, cos_g], [a2, b2, c2], corr, intr) {
                let duplicate = solutions.iter().any(|s| {
                    (s.translation() - pose.translation()).norm() < 1e-9 * (1.0 + pose.translation().norm())
                        && s.inverse().compose(&pose).rotation_angle() < 1e-9
                });
                if !duplicate {
                    solutions.push(pose);
                }
            }
        }
    }
    if solutions.is_empty() {
        return Err(RobustError::NoSolution);
    }
    Ok(solutions)
}

#[allow(clippy::too_many_arguments)]
fn pose_from_ratios(
    u: f64,
    v: f64,
    x: &[Vector3<f64>; 3],
    f: &[Vector3<f64>; 3],
    cos: [f64; 3],
    dist2: [f64; 3],
    corr: &[Correspondence2D3D; 3],
    intr: &CameraIntrinsics,
) -> Option<RigidTransform> {
    let [_, cos_b, _] = cos;
    let [_, b2, _] = dist2;
    {
        if !(u > 0.0) {
            return None;
        }
        let k = 1.0 - 2.0 * cos_b * v + v * v;
        if !(k > 0.0) {
            return None;
        }
        let s1 = (b2 / k).sqrt();
        let depths = polish_depths(Vector3::new(s1, u * s1, v * s1), cos, dist2);
        if depths.iter().any(|d| !(*d > 0.0)) {
            return None;
        }
        let cam_pts: Vec<Vector3<f64>> = (0..3).map(|i| f[i] * depths[i]).collect();
        let pose = kabsch_points(x, &cam_pts, &[1.0; 3]).ok()?;
        let consistent = corr.iter().all(|c| {
            intr.project(&pose.apply(&c.model_point))
                .map(|p| (p - c.pixel).norm() <= SELF_CONSISTENCY_PX)
                .unwrap_or(false)
        });
        consistent.then_some(pose)
    }
}
