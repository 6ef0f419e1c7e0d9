use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{calibrate_static_camera, calibrate_static_camera_fixed_offset, CalibError, StaticCalibResult, SyncSolveConfig};
use crate::geometry::{CameraIntrinsics, CameraModel};
use crate::trajectory::{CalibrationBoard, CornerObservationSequence, PoseTrack};

#[derive(Debug, Clone)]
pub struct RigCameraInput {
    pub camera_id: String,
    pub intrinsics: CameraIntrinsics,
    pub observations: CornerObservationSequence,
}

/// Cameras sharing one hardware clock. Only `reference` gets a free offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncGroup {
    pub name: String,
    pub reference: String,
    pub members: Vec<String>,
}

impl SyncGroup {
    /// Groups from the cameras' `sync_group` labels; the first camera listed
    /// with a label becomes its reference.
    pub fn from_cameras(cameras: &[CameraModel]) -> Vec<SyncGroup> {
        let mut groups: Vec<SyncGroup> = Vec::new();
        for cam in cameras {
            let Some(name) = &cam.sync_group else { continue };
            match groups.iter_mut().find(|g| &g.name == name) {
                Some(g) => g.members.push(cam.id.clone()),
                None => groups.push(SyncGroup { name: name.clone(), reference: cam.id.clone(), members: vec![cam.id.clone()] }),
            }
        }
        groups
    }
}

#[derive(Debug)]
pub struct RigCameraOutcome {
    pub camera_id: String,
    pub group: String,
    pub result: Result<StaticCalibResult, CalibError>,
}

/// Calibrates every camera. Group references are solved first with a free
/// offset; the other members reuse it and solve only their extrinsics. A
/// camera outside every group forms its own group.
pub fn calibrate_rig(
    inputs: &[RigCameraInput],
    groups: &[SyncGroup],
    board_track: &PoseTrack,
    board: &CalibrationBoard,
    cfg: &SyncSolveConfig,
) -> Result<Vec<RigCameraOutcome>, CalibError> {
    cfg.validate()?;
    let ids: BTreeSet<&str> = inputs.iter().map(|i| i.camera_id.as_str()).collect();
    if ids.len() != inputs.len() {
        return Err(CalibError::InvalidConfig("duplicate camera ids".into()));
    }
    let mut group_of: BTreeMap<&str, &SyncGroup> = BTreeMap::new();
    for g in groups {
        if !ids.contains(g.reference.as_str()) {
            return Err(CalibError::UnknownCamera(g.reference.clone()));
        }
        if !g.members.contains(&g.reference) {
            return Err(CalibError::InvalidConfig(format!("group '{}' does not list its reference", g.name)));
        }
        for m in &g.members {
            if !ids.contains(m.as_str()) {
                return Err(CalibError::UnknownCamera(m.clone()));
            }
            if group_of.insert(m.as_str(), g).is_some() {
                return Err(CalibError::InvalidConfig(format!("camera '{m}' is in more than one sync group")));
            }
        }
    }

    let is_reference = |id: &str| group_of.get(id).is_none_or(|g| g.reference == id);
    let group_name = |id: &str| group_of.get(id).map_or_else(|| id.to_string(), |g| g.name.clone());

    let references: Vec<RigCameraOutcome> = inputs
        .par_iter()
        .filter(|i| is_reference(&i.camera_id))
        .map(|i| RigCameraOutcome {
            camera_id: i.camera_id.clone(),
            group: group_name(&i.camera_id),
            result: calibrate_static_camera(&i.observations, board_track, board, &i.intrinsics, cfg),
        })
        .collect();
    let reference_offset: BTreeMap<String, Option<f64>> = references
        .iter()
        .map(|o| (o.group.clone(), o.result.as_ref().ok().map(|r| r.clock_offset)))
        .collect();
    let members: Vec<RigCameraOutcome> = inputs
        .par_iter()
        .filter(|i| !is_reference(&i.camera_id))
        .map(|i| {
            let group = group_name(&i.camera_id);
            let result = match reference_offset.get(&group).copied().flatten() {
                Some(offset) => calibrate_static_camera_fixed_offset(&i.observations, board_track, board, &i.intrinsics, cfg, offset),
                None => Err(CalibError::ReferenceFailed { camera_id: i.camera_id.clone(), group: group.clone() }),
            };
            RigCameraOutcome { camera_id: i.camera_id.clone(), group, result }
        })
        .collect();

    // Report in input order.
    let mut all: BTreeMap<String, RigCameraOutcome> =
        references.into_iter().chain(members).map(|o| (o.camera_id.clone(), o)).collect();
    Ok(inputs.iter().filter_map(|i| all.remove(&i.camera_id)).collect())
}
