//! Synthetic rigs, board calibration sequences and object scenes with known
//! ground truth.
//!
//! All generation is a pure function of the specs and their seed. Per-frame
//! object generation uses a sub-seed `seed ^ frame`; per-camera noise streams
//! use `seed ^ fnv1a(camera_id)`.

mod board;
mod drill;
mod object;
mod rig;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::RigidTransform;
use crate::io::SCHEMA_VERSION;

pub use board::{simulate_board, BoardSimulation};
pub use drill::drill_model;
pub use object::{simulate_object, ObjectFrame, ObjectSimulation, ObjectView};
pub use rig::{make_rig, MobileCamera, RigSpec, SimRig, SyncGroupSpec};

/// Legal object-to-camera distances, mm.
pub const LEGAL_DISTANCE_RANGE: [f64; 2] = [400.0, 1700.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid {field}: {message}")]
    InvalidSpec { field: String, message: String },
    #[error("could not place the object within the distance range after {0} attempts")]
    Placement(usize),
}

pub(crate) fn invalid(field: &str, message: impl Into<String>) -> SimError {
    SimError::InvalidSpec { field: field.to_string(), message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    /// Board sequence length, s.
    pub duration: f64,
    pub camera_rate: f64,
    pub tracker_rate: f64,
    /// Board speed along its path, m/s.
    pub board_speed: f64,
    /// Mean spacing of the random waypoints the board path is smoothed through, mm.
    pub waypoint_spacing: f64,
    /// Board path stays within this box around the origin, mm.
    pub workspace_half_extent: [f64; 3],
    pub corner_sigma: f64,
    pub corner_outlier_fraction: f64,
    /// Number of object frames.
    pub frames: usize,
    /// Object centers are drawn in this box around the origin, mm.
    pub object_half_extent: [f64; 3],
    /// Allowed object-to-camera distance, mm.
    pub distance_range: [f64; 2],
    pub correspondence_sigma: f64,
    /// Fraction of each view's probability mass on outliers.
    pub outlier_fraction: f64,
    /// Inlier samples drawn per view (fewer if less is visible).
    pub samples_per_view: usize,
    /// Surface points per frame that inlier samples may reference, shared by
    /// all views so that views predict common model points (0: all points).
    pub model_point_pool: usize,
    /// Angular fraction of the object hidden in each view.
    pub occlusion_fraction: f64,
    /// Per-camera overrides of `occlusion_fraction`.
    pub view_occlusion: std::collections::BTreeMap<String, f64>,
    /// Fraction of the object box cut from one side in head-mounted views.
    pub truncation_fraction: f64,
    pub depth: bool,
    pub depth_sigma: f64,
    pub depth_invalid_fraction: f64,
    /// Fraction of the patch height covered by a surface in front of the object (depth only).
    pub depth_occluder_fraction: f64,
    /// Mask grid cell, px.
    pub mask_cell: u32,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            duration: 60.0,
            camera_rate: 10.0,
            tracker_rate: 100.0,
            board_speed: 0.3,
            waypoint_spacing: 250.0,
            workspace_half_extent: [200.0, 200.0, 150.0],
            corner_sigma: 0.5,
            corner_outlier_fraction: 0.0,
            frames: 200,
            object_half_extent: [100.0, 100.0, 60.0],
            distance_range: LEGAL_DISTANCE_RANGE,
            correspondence_sigma: 1.0,
            outlier_fraction: 0.2,
            samples_per_view: 300,
            model_point_pool: 1000,
            occlusion_fraction: 0.0,
            view_occlusion: Default::default(),
            truncation_fraction: 0.0,
            depth: false,
            depth_sigma: 0.0,
            depth_invalid_fraction: 0.0,
            depth_occluder_fraction: 0.0,
            mask_cell: 4,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let fractions = [
            ("corner_outlier_fraction", self.corner_outlier_fraction),
            ("occlusion_fraction", self.occlusion_fraction),
            ("truncation_fraction", self.truncation_fraction),
            ("depth_invalid_fraction", self.depth_invalid_fraction),
            ("depth_occluder_fraction", self.depth_occluder_fraction),
        ];
        for (field, v) in fractions {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(field, format!("{v} not in [0, 1]")));
            }
        }
        for (id, v) in &self.view_occlusion {
            if !(0.0..=1.0).contains(v) {
                return Err(invalid("view_occlusion", format!("{id}: {v} not in [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(invalid("outlier_fraction", format!("{} not in [0, 1)", self.outlier_fraction)));
        }
        let [lo, hi] = self.distance_range;
        if !(lo > 0.0 && hi > lo) {
            return Err(invalid("distance_range", "must be positive and increasing"));
        }
        if lo < LEGAL_DISTANCE_RANGE[0] || hi > LEGAL_DISTANCE_RANGE[1] {
            return Err(invalid(
                "distance_range",
                format!("[{lo}, {hi}] mm exceeds the legal range [{}, {}] mm", LEGAL_DISTANCE_RANGE[0], LEGAL_DISTANCE_RANGE[1]),
            ));
        }
        let positive = [
            ("duration", self.duration),
            ("camera_rate", self.camera_rate),
            ("tracker_rate", self.tracker_rate),
            ("waypoint_spacing", self.waypoint_spacing),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(field, format!("{v} must be positive")));
            }
        }
        let non_negative = [
            ("board_speed", self.board_speed),
            ("corner_sigma", self.corner_sigma),
            ("correspondence_sigma", self.correspondence_sigma),
            ("depth_sigma", self.depth_sigma),
        ];
        for (field, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(field, format!("{v} must be non-negative")));
            }
        }
        if self.workspace_half_extent.iter().chain(&self.object_half_extent).any(|v| !(*v >= 0.0)) {
            return Err(invalid("workspace_half_extent", "extents must be non-negative"));
        }
        if self.mask_cell == 0 {
            return Err(invalid("mask_cell", "must be >= 1"));
        }
        Ok(())
    }

    pub fn occlusion_for(&self, camera_id: &str) -> f64 {
        self.view_occlusion.get(camera_id).copied().unwrap_or(self.occlusion_fraction)
    }
}

/// Ground truth kept apart from the emitted inputs; only evaluation reads it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimTruth {
    pub schema_version: String,
    pub cameras: Vec<TruthCamera>,
    #[serde(default)]
    pub object_poses: Vec<TruthPose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthCamera {
    pub id: String,
    /// `T_W^C` of static cameras.
    pub extrinsics: Option<RigidTransform>,
    pub clock_offset: f64,
    /// `T_H^P` of head-mounted cameras.
    pub hand_eye: Option<RigidTransform>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthPose {
    pub frame: u64,
    pub timestamp: f64,
    /// `T_O^W`
    pub pose: RigidTransform,
}

impl SimTruth {
    pub fn new(rig: &SimRig, object: Option<&ObjectSimulation>) -> Self {
        let cameras = rig
            .cameras
            .iter()
            .map(|c| {
                let mobile = rig.mobile(&c.id);
                TruthCamera {
                    id: c.id.clone(),
                    extrinsics: mobile.is_none().then_some(c.extrinsics),
                    clock_offset: c.clock_offset,
                    hand_eye: mobile.map(|m| m.hand_eye),
                }
            })
            .collect();
        let object_poses = object
            .map(|o| o.frames.iter().map(|f| TruthPose { frame: f.frame, timestamp: f.timestamp, pose: f.truth }).collect())
            .unwrap_or_default();
        Self { schema_version: SCHEMA_VERSION.to_string(), cameras, object_poses }
    }
}

pub(crate) fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
