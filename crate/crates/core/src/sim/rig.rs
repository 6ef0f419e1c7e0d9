use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fnv1a, invalid, SimError};
use crate::geometry::{CameraIntrinsics, CameraModel, RigidTransform};
use crate::trajectory::{PoseTrack, TimedPose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncGroupSpec {
    pub name: String,
    /// The first member is the group's reference camera.
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigSpec {
    pub perimeter_count: usize,
    pub perimeter_radius: f64,
    pub perimeter_height: f64,
    pub perimeter_fov_deg: f64,
    pub ceiling: bool,
    pub ceiling_height: f64,
    pub ceiling_fov_deg: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub hmd_count: usize,
    pub hmd_fov_deg: f64,
    /// Head-mounted camera distance from the origin, mm.
    pub hmd_standoff: f64,
    /// Amplitude of the smoothed head jitter: position (mm) and angle (deg).
    pub hmd_jitter_mm: f64,
    pub hmd_jitter_deg: f64,
    /// Injected clock offsets by camera id, s (missing ids: 0).
    pub clock_offsets: BTreeMap<String, f64>,
    pub sync_groups: Vec<SyncGroupSpec>,
    pub seed: u64,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self {
            perimeter_count: 4,
            perimeter_radius: 1000.0,
            perimeter_height: 500.0,
            perimeter_fov_deg: 90.0,
            ceiling: true,
            ceiling_height: 1300.0,
            ceiling_fov_deg: 90.0,
            image_width: 1280,
            image_height: 960,
            hmd_count: 0,
            hmd_fov_deg: 50.0,
            hmd_standoff: 450.0,
            hmd_jitter_mm: 15.0,
            hmd_jitter_deg: 2.0,
            clock_offsets: BTreeMap::new(),
            sync_groups: Vec::new(),
            seed: 0,
        }
    }
}

/// A head-mounted camera: its marker is tracked (`f_H^W`), the camera sits
/// at a fixed hand-eye transform `T_H^P` from the marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MobileCamera {
    pub id: String,
    pub hand_eye: RigidTransform,
    /// Camera-to-world pose at rest.
    nominal: RigidTransform,
    jitter_mm: f64,
    jitter_rad: f64,
    /// Per-axis (frequency Hz, phase) for position then rotation.
    waves: Vec<[(f64, f64); 3]>,
}

impl MobileCamera {
    /// Marker pose `f_H^W` at reference time `t`.
    pub fn marker_pose(&self, t: f64) -> RigidTransform {
        let signal = |k: usize, axis: usize| {
            self.waves[k * 3 + axis].iter().map(|(f, p)| (2.0 * PI * f * t + p).sin()).sum::<f64>() / 3.0
        };
        let dp = Vector3::new(signal(0, 0), signal(0, 1), signal(0, 2)) * self.jitter_mm;
        let dr = Vector3::new(signal(1, 0), signal(1, 1), signal(1, 2)) * self.jitter_rad;
        let cam_to_world = RigidTransform::new(
            UnitQuaternion::from_scaled_axis(dr) * self.nominal.rotation(),
            self.nominal.translation() + dp,
        );
        cam_to_world.compose(&self.hand_eye)
    }

    /// Camera extrinsics `T_W^C = T_H^P * f_H^W(t)^-1`.
    pub fn extrinsics_at(&self, t: f64) -> RigidTransform {
        self.hand_eye.compose(&self.marker_pose(t).inverse())
    }

    /// Marker track sampled at `rate` Hz over `[0, duration]`.
    pub fn track(&self, duration: f64, rate: f64) -> PoseTrack {
        let n = (duration * rate).round() as usize;
        let samples = (0..=n).map(|k| {
            let t = k as f64 / rate;
            TimedPose::new(t, self.marker_pose(t))
        });
        PoseTrack::new(format!("{}_marker", self.id), "world", samples.collect()).expect("increasing timestamps")
    }
}

/// Simulated rig with ground truth: static cameras carry their true
/// extrinsics and offsets; head-mounted ones their nominal pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRig {
    pub cameras: Vec<CameraModel>,
    pub mobile: Vec<MobileCamera>,
}

impl SimRig {
    pub fn mobile(&self, id: &str) -> Option<&MobileCamera> {
        self.mobile.iter().find(|m| m.id == id)
    }

    pub fn camera(&self, id: &str) -> Option<&CameraModel> {
        self.cameras.iter().find(|c| c.id == id)
    }

    /// Extrinsics of camera `index` at reference time `t`.
    pub fn extrinsics_at(&self, index: usize, t: f64) -> RigidTransform {
        let cam = &self.cameras[index];
        self.mobile(&cam.id).map_or(cam.extrinsics, |m| m.extrinsics_at(t))
    }
}

fn perimeter_ids(n: usize) -> Vec<String> {
    if n == 4 {
        ["OR", "OL", "L", "R"].iter().map(|s| s.to_string()).collect()
    } else {
        (0..n).map(|i| format!("P{i}")).collect()
    }
}

fn check_fov(field: &str, fov: f64) -> Result<(), SimError> {
    if !(fov > 10.0 && fov < 170.0) {
        return Err(invalid(field, format!("{fov} deg not in (10, 170)")));
    }
    Ok(())
}

/// Builds the rig: perimeter cameras evenly spaced on a circle (the surgeon
/// stands at -y), an optional ceiling camera, and head-mounted cameras near
/// the surgeon, all looking at the origin.
pub fn make_rig(spec: &RigSpec) -> Result<SimRig, SimError> {
    let total = spec.perimeter_count + spec.ceiling as usize + spec.hmd_count;
    if total == 0 {
        return Err(invalid("camera count", "rig has no cameras"));
    }
    check_fov("perimeter_fov_deg", spec.perimeter_fov_deg)?;
    check_fov("ceiling_fov_deg", spec.ceiling_fov_deg)?;
    check_fov("hmd_fov_deg", spec.hmd_fov_deg)?;
    if spec.image_width == 0 || spec.image_height == 0 {
        return Err(invalid("image size", "must be positive"));
    }
    for (field, v) in [
        ("perimeter_radius", spec.perimeter_radius),
        ("ceiling_height", spec.ceiling_height),
        ("hmd_standoff", spec.hmd_standoff),
    ] {
        if !(v > 0.0) {
            return Err(invalid(field, format!("{v} must be positive")));
        }
    }
    let intr = |fov: f64| CameraIntrinsics::from_fov(fov, spec.image_width, spec.image_height);
    let target = Vector3::zeros();
    let up = Vector3::z();
    let mut cameras = Vec::new();
    for (i, id) in perimeter_ids(spec.perimeter_count).into_iter().enumerate() {
        let az = PI / 4.0 + 2.0 * PI * i as f64 / spec.perimeter_count as f64;
        let eye = Vector3::new(spec.perimeter_radius * az.cos(), spec.perimeter_radius * az.sin(), spec.perimeter_height);
        cameras.push(CameraModel::new(id, intr(spec.perimeter_fov_deg), RigidTransform::look_at(eye, target, up)));
    }
    if spec.ceiling {
        let eye = Vector3::new(0.0, 0.0, spec.ceiling_height);
        cameras.push(CameraModel::new("C", intr(spec.ceiling_fov_deg), RigidTransform::look_at(eye, target, Vector3::y())));
    }
    let mut mobile = Vec::new();
    for k in 0..spec.hmd_count {
        let id = match k {
            0 => "S".to_string(),
            1 => "A".to_string(),
            _ => format!("H{k}"),
        };
        let (az, el) = match k {
            0 => (-PI / 2.0, 50f64.to_radians()),
            1 => (-PI / 2.0 - 0.7, 45f64.to_radians()),
            _ => (-PI / 2.0 + 0.5 * k as f64, 45f64.to_radians()),
        };
        let eye = spec.hmd_standoff * Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
        let extrinsics = RigidTransform::look_at(eye, target, up);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ fnv1a(&id));
        let waves = (0..6)
            .map(|_| std::array::from_fn(|_| (rng.random_range(0.1..0.6), rng.random_range(0.0..2.0 * PI))))
            .collect();
        let hand_eye = RigidTransform::from_axis_angle(Vector3::new(0.02, -0.03, 0.05), Vector3::new(25.0, -10.0, 40.0));
        mobile.push(MobileCamera {
            id: id.clone(),
            hand_eye,
            nominal: extrinsics.inverse(),
            jitter_mm: spec.hmd_jitter_mm,
            jitter_rad: spec.hmd_jitter_deg.to_radians(),
            waves,
        });
        cameras.push(CameraModel::new(id, intr(spec.hmd_fov_deg), extrinsics));
    }

    for cam in &mut cameras {
        cam.clock_offset = spec.clock_offsets.get(&cam.id).copied().unwrap_or(0.0);
    }
    for id in spec.clock_offsets.keys() {
        if !cameras.iter().any(|c| &c.id == id) {
            return Err(invalid("clock_offsets", format!("unknown camera '{id}'")));
        }
    }
    for g in &spec.sync_groups {
        let Some(reference) = g.members.first() else {
            return Err(invalid("sync_groups", format!("group '{}' is empty", g.name)));
        };
        let offset = cameras.iter().find(|c| &c.id == reference).map(|c| c.clock_offset);
        let Some(offset) = offset else {
            return Err(invalid("sync_groups", format!("unknown camera '{reference}'")));
        };
        for m in &g.members {
            let cam = cameras.iter_mut().find(|c| &c.id == m).ok_or_else(|| invalid("sync_groups", format!("unknown camera '{m}'")))?;
            if cam.sync_group.is_some() {
                return Err(invalid("sync_groups", format!("camera '{m}' in two groups")));
            }
            if spec.clock_offsets.contains_key(m) && cam.clock_offset != offset {
                return Err(invalid("clock_offsets", format!("'{m}' differs from its sync group reference")));
            }
            cam.clock_offset = offset;
            cam.sync_group = Some(g.name.clone());
        }
    }
    Ok(SimRig { cameras, mobile })
}
