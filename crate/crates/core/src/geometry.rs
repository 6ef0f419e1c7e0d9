//! Rigid transforms, pinhole projection with Brown-Conrady distortion, and
//! rotation metrics.
//!
//! Units are millimeters, seconds and radians throughout. A transform named
//! `T_A^B` maps coordinates expressed in frame `A` into frame `B`, so
//! `compose(t_b_c, t_a_b)` yields `T_A^C`.

use nalgebra::{Matrix2x3, Matrix3, Matrix4, Point3, UnitQuaternion, Vector2, Vector3, Quaternion};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {z} mm)")]
    BehindCamera { z: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid transform: {0}")]
    InvalidTransform(String),
}

/// An element of SE(3): unit-quaternion rotation followed by a translation in mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        // Re-normalize so long compose chains never drift off the unit sphere.
        let rotation = UnitQuaternion::new_normalize(rotation.into_inner());
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    pub fn from_rotation(rotation: UnitQuaternion<f64>) -> Self {
        Self::new(rotation, Vector3::zeros())
    }

    /// Builds a transform from a rotation vector (axis * angle, radians) and a translation.
    pub fn from_axis_angle(rotation_vector: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::from_scaled_axis(rotation_vector), translation)
    }

    /// Builds a transform from a `[w, x, y, z]` quaternion, normalizing it.
    pub fn from_wxyz(wxyz: [f64; 4], translation: [f64; 3]) -> Result<Self, GeometryError> {
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        let n = q.norm();
        if !n.is_finite() || n < 1e-12 || translation.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidTransform(format!(
                "quaternion {wxyz:?} / translation {translation:?}"
            )));
        }
        Ok(Self::new(
            UnitQuaternion::from_quaternion(q),
            Vector3::from(translation),
        ))
    }

    /// Builds a transform from a proper rotation matrix.
    pub fn from_matrix_parts(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*rotation);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    /// Camera pose from its optical center and a target point, with `up` as the
    /// approximate image-up direction in the source frame. Returns `T_W^C` for a
    /// camera whose z axis points at `target`, x to the right and y down.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let mut x = z.cross(&up);
        if x.norm() < 1e-9 {
            x = z.cross(&Vector3::new(0.0, 1.0, 0.0));
            if x.norm() < 1e-9 {
                x = z.cross(&Vector3::new(1.0, 0.0, 0.0));
            }
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rot = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(rot * eye);
        Self::from_matrix_parts(&rot, t)
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Homogeneous 4x4 matrix.
    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `[w, x, y, z]`
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn apply_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.apply(&p.coords))
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let inv = self.rotation.inverse();
        Self::new(inv, -(inv * self.translation))
    }

    /// Left-multiplies by the exponential of a twist `[omega, v]`.
    pub(crate) fn perturbed(&self, delta: &nalgebra::Vector6<f64>) -> RigidTransform {
        let omega = Vector3::new(delta[0], delta[1], delta[2]);
        let v = Vector3::new(delta[3], delta[4], delta[5]);
        let update = RigidTransform::new(UnitQuaternion::from_scaled_axis(omega), v);
        update.compose(self)
    }

    pub fn rotation_angle(&self) -> f64 {
        geodesic_distance(&UnitQuaternion::identity(), &self.rotation)
    }
}

impl std::ops::Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

/// `compose(a, b).apply(x) == a.apply(b.apply(x))`
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RigidTransformRepr {
    quaternion_wxyz: [f64; 4],
    translation_xyz: [f64; 3],
}

impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        RigidTransformRepr {
            quaternion_wxyz: self.wxyz(),
            translation_xyz: self.translation.into(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = RigidTransformRepr::deserialize(deserializer)?;
        RigidTransform::from_wxyz(repr.quaternion_wxyz, repr.translation_xyz)
            .map_err(serde::de::Error::custom)
    }
}

/// Geodesic angle between two orientations, in `[0, pi]`. Sign-flip invariant.
pub fn geodesic_distance(r1: &UnitQuaternion<f64>, r2: &UnitQuaternion<f64>) -> f64 {
    // Vector and scalar parts of conj(r1) * r2, written out so that r2 = -r1
    // cancels exactly.
    let (a, b) = (r1.quaternion(), r2.quaternion());
    let (va, vb) = (a.imag(), b.imag());
    let v = (a.w * vb - b.w * va - va.cross(&vb)).norm();
    let w = (a.w * b.w + va.dot(&vb)).abs();
    (2.0 * v.atan2(w)).clamp(0.0, std::f64::consts::PI)
}

/// Brown-Conrady radial (k1, k2, k3) and tangential (p1, p2) coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Distortion {
    #[serde(default)]
    pub k1: f64,
    #[serde(default)]
    pub k2: f64,
    #[serde(default)]
    pub k3: f64,
    #[serde(default)]
    pub p1: f64,
    #[serde(default)]
    pub p2: f64,
}

impl Distortion {
    pub fn is_zero(&self) -> bool {
        self.k1 == 0.0 && self.k2 == 0.0 && self.k3 == 0.0 && self.p1 == 0.0 && self.p2 == 0.0
    }

    /// Distorts a normalized image point and returns the 2x2 Jacobian.
    pub fn distort_with_jacobian(&self, x: f64, y: f64) -> (Vector2<f64>, nalgebra::Matrix2<f64>) {
        let Distortion { k1, k2, k3, p1, p2 } = *self;
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
        let dradial = k1 + 2.0 * k2 * r2 + 3.0 * k3 * r2 * r2;
        let xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x);
        let yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y;
        let dxd_dx = radial + 2.0 * x * x * dradial + 2.0 * p1 * y + 6.0 * p2 * x;
        let dxd_dy = 2.0 * x * y * dradial + 2.0 * p1 * x + 2.0 * p2 * y;
        let dyd_dx = 2.0 * x * y * dradial + 2.0 * p1 * x + 2.0 * p2 * y;
        let dyd_dy = radial + 2.0 * y * y * dradial + 6.0 * p1 * y + 2.0 * p2 * x;
        (
            Vector2::new(xd, yd),
            nalgebra::Matrix2::new(dxd_dx, dxd_dy, dyd_dx, dyd_dy),
        )
    }

    pub fn distort(&self, x: f64, y: f64) -> Vector2<f64> {
        self.distort_with_jacobian(x, y).0
    }

    /// Inverts the forward model with Newton iterations.
    pub fn undistort(&self, xd: f64, yd: f64) -> Vector2<f64> {
        if self.is_zero() {
            return Vector2::new(xd, yd);
        }
        let target = Vector2::new(xd, yd);
        let mut p = target;
        for _ in 0..50 {
            let (f, j) = self.distort_with_jacobian(p.x, p.y);
            let r = f - target;
            if r.norm() < 1e-15 {
                break;
            }
            match j.try_inverse() {
                Some(inv) => p -= inv * r,
                None => break,
            }
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub distortion: Distortion,
}

impl CameraIntrinsics {
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            distortion: Distortion::default(),
        }
    }

    /// Square-pixel camera with the principal point at the image center and the
    /// given horizontal field of view.
    pub fn from_fov(horizontal_fov_deg: f64, width: u32, height: u32) -> Self {
        let f = 0.5 * width as f64 / (0.5 * horizontal_fov_deg.to_radians()).tan();
        Self::pinhole(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |msg: String| Err(GeometryError::InvalidIntrinsics(msg));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad(format!("focal lengths must be positive (fx={}, fy={})", self.fx, self.fy));
        }
        if !(0.0..self.width as f64).contains(&self.cx) {
            return bad(format!("cx={} outside [0, {})", self.cx, self.width));
        }
        if !(0.0..self.height as f64).contains(&self.cy) {
            return bad(format!("cy={} outside [0, {})", self.cy, self.height));
        }
        let d = self.distortion;
        if [d.k1, d.k2, d.k3, d.p1, d.p2].iter().any(|v| !v.is_finite()) {
            return bad("non-finite distortion coefficient".into());
        }
        Ok(())
    }

    pub fn project(&self, x_cam: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if x_cam.z <= 0.0 {
            return Err(GeometryError::BehindCamera { z: x_cam.z });
        }
        let d = self.distortion.distort(x_cam.x / x_cam.z, x_cam.y / x_cam.z);
        Ok(Vector2::new(self.fx * d.x + self.cx, self.fy * d.y + self.cy))
    }

    /// Projection and its Jacobian with respect to the camera-frame point.
    pub fn project_with_jacobian(
        &self,
        x_cam: &Vector3<f64>,
    ) -> Result<(Vector2<f64>, Matrix2x3<f64>), GeometryError> {
        if x_cam.z <= 0.0 {
            return Err(GeometryError::BehindCamera { z: x_cam.z });
        }
        let iz = 1.0 / x_cam.z;
        let (x, y) = (x_cam.x * iz, x_cam.y * iz);
        let (d, jd) = self.distortion.distort_with_jacobian(x, y);
        let jn = Matrix2x3::new(iz, 0.0, -x * iz, 0.0, iz, -y * iz);
        let jf = nalgebra::Matrix2::new(self.fx, 0.0, 0.0, self.fy);
        Ok((
            Vector2::new(self.fx * d.x + self.cx, self.fy * d.y + self.cy),
            jf * jd * jn,
        ))
    }

    /// Undistorted normalized coordinates `(x/z, y/z)` of a pixel.
    pub fn normalize(&self, pixel: &Vector2<f64>) -> Vector2<f64> {
        let xd = (pixel.x - self.cx) / self.fx;
        let yd = (pixel.y - self.cy) / self.fy;
        self.distortion.undistort(xd, yd)
    }

    /// Unit-norm viewing ray through a pixel, in the camera frame.
    pub fn bearing(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        let n = self.normalize(pixel);
        Vector3::new(n.x, n.y, 1.0).normalize()
    }

    /// Pixel the point would hit on an ideal (distortion-free) sensor.
    pub fn undistort_pixel(&self, pixel: &Vector2<f64>) -> Vector2<f64> {
        let n = self.normalize(pixel);
        Vector2::new(self.fx * n.x + self.cx, self.fy * n.y + self.cy)
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x < self.width as f64
            && pixel.y < self.height as f64
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

/// A calibrated camera. `extrinsics` is `T_W^C` (world to camera) and
/// `clock_offset` maps the device clock onto the reference clock:
/// `t_reference = t_device + clock_offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraModel {
    pub id: String,
    pub intrinsics: CameraIntrinsics,
    #[serde(default)]
    pub extrinsics: RigidTransform,
    #[serde(default)]
    pub clock_offset: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sync_group: Option<String>,
}

impl CameraModel {
    pub fn new(id: impl Into<String>, intrinsics: CameraIntrinsics, extrinsics: RigidTransform) -> Self {
        Self {
            id: id.into(),
            intrinsics,
            extrinsics,
            clock_offset: 0.0,
            sync_group: None,
        }
    }

    /// Optical center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.extrinsics.inverse().translation
    }

    /// Principal (z) axis in world coordinates.
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.extrinsics.rotation.inverse() * Vector3::z()
    }

    pub fn to_camera(&self, x_world: &Vector3<f64>) -> Vector3<f64> {
        self.extrinsics.apply(x_world)
    }

    pub fn project_world(&self, x_world: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        self.intrinsics.project(&self.to_camera(x_world))
    }

    /// Unit ray direction through a pixel, in world coordinates.
    pub fn world_ray(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        self.extrinsics.rotation.inverse() * self.intrinsics.bearing(pixel)
    }
}

/// Checks that cameras sharing a sync group share one clock offset.
pub fn check_sync_groups(cameras: &[CameraModel]) -> Result<(), GeometryError> {
    let mut seen: std::collections::BTreeMap<&str, f64> = Default::default();
    for cam in cameras {
        if let Some(group) = cam.sync_group.as_deref() {
            match seen.get(group) {
                Some(&offset) if offset != cam.clock_offset => {
                    return Err(GeometryError::InvalidTransform(format!(
                        "sync group {group}: camera {} has clock offset {} but the group uses {offset}",
                        cam.id, cam.clock_offset
                    )))
                }
                _ => {
                    seen.insert(group, cam.clock_offset);
                }
            }
        }
    }
    Ok(())
}

/// Skew-symmetric cross-product matrix.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}
