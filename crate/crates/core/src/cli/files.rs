//! On-disk layout of a working directory and the formats owned by the CLI.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::geometry::{CameraIntrinsics, CameraModel, RigidTransform};
use crate::io::{check_schema, SCHEMA_VERSION};
use crate::mvpose::{DepthStatus, PoseEstimate};
use crate::sim::SimRig;

pub const RIG: &str = "rig.json";
pub const CALIBRATED_RIG: &str = "calibrated_rig.json";
pub const TRUTH: &str = "truth.json";
pub const BOARD: &str = "board.json";
pub const BOARD_TRACK: &str = "board_track.jsonl";
pub const HMD_TRACK_DIR: &str = "hmd_tracks";
pub const CORNERS: &str = "corners.csv";
pub const MODEL: &str = "model.json";
pub const CORRESPONDENCES: &str = "correspondences.jsonl";
pub const DEPTH_DIR: &str = "depth";
pub const CALIBRATION: &str = "calibration.json";
pub const CALIB_REPORT: &str = "calib_report.json";
pub const CALIB_RESIDUALS: &str = "calib_residuals.csv";
pub const ESTIMATES: &str = "estimates.jsonl";
pub const EVAL_RECORDS: &str = "eval_records.csv";
pub const EVAL_SUMMARY: &str = "eval_summary.json";
pub const RECALL_DIR: &str = "recall";

pub fn depth_file(frame: u64, camera_id: &str) -> String {
    format!("{DEPTH_DIR}/{frame:06}_{camera_id}.u16")
}

pub fn hmd_track_file(camera_id: &str) -> String {
    format!("{HMD_TRACK_DIR}/{camera_id}.jsonl")
}

/// A camera as known to the pipeline. Before calibration static cameras
/// lack `extrinsics` and `clock_offset`; head-mounted cameras carry their
/// hand-eye transform and never have fixed extrinsics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigCamera {
    pub id: String,
    pub intrinsics: CameraIntrinsics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extrinsics: Option<RigidTransform>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clock_offset: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sync_group: Option<String>,
    /// `T_H^P`
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hand_eye: Option<RigidTransform>,
}

impl RigCamera {
    pub fn is_mobile(&self) -> bool {
        self.hand_eye.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigFile {
    pub schema_version: String,
    pub cameras: Vec<RigCamera>,
}

impl RigFile {
    /// The rig as a calibration input: intrinsics, sync labels and hand-eye only.
    pub fn uncalibrated(rig: &SimRig) -> Self {
        let cameras = rig
            .cameras
            .iter()
            .map(|c| RigCamera {
                id: c.id.clone(),
                intrinsics: c.intrinsics,
                extrinsics: None,
                clock_offset: None,
                sync_group: c.sync_group.clone(),
                hand_eye: rig.mobile(&c.id).map(|m| m.hand_eye),
            })
            .collect();
        Self { schema_version: SCHEMA_VERSION.to_string(), cameras }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        check_schema(&self.schema_version).map_err(|e| CliError::Data(e.to_string()))?;
        let mut ids: Vec<&str> = self.cameras.iter().map(|c| c.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(CliError::Data(format!("duplicate camera id '{}' in rig", w[0])));
        }
        for c in &self.cameras {
            c.intrinsics.validate().map_err(|e| CliError::Data(format!("camera {}: {e}", c.id)))?;
        }
        Ok(())
    }

    pub fn camera(&self, id: &str) -> Option<&RigCamera> {
        self.cameras.iter().find(|c| c.id == id)
    }

    /// Camera models for estimation. Static cameras must be calibrated;
    /// moving ones get identity extrinsics, replaced per frame by the
    /// distribution's camera pose.
    pub fn camera_models(&self) -> Result<Vec<CameraModel>, CliError> {
        self.cameras
            .iter()
            .map(|c| {
                let extrinsics = match (c.extrinsics, c.is_mobile()) {
                    (Some(e), _) => e,
                    (None, true) => RigidTransform::identity(),
                    (None, false) => return Err(CliError::Data(format!("camera {} has no extrinsics; calibrate first", c.id))),
                };
                let mut m = CameraModel::new(c.id.clone(), c.intrinsics, extrinsics);
                m.clock_offset = c.clock_offset.unwrap_or(0.0);
                m.sync_group = c.sync_group.clone();
                Ok(m)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMode {
    Single,
    Multi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthOutcome {
    pub status: DepthStatus,
    pub valid_pixels: usize,
    pub iterations: usize,
    pub rms_mm: Option<f64>,
    /// World pose before refinement.
    pub initial_pose: RigidTransform,
}

/// One estimate of one frame under one camera configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateRecord {
    pub frame: u64,
    pub config: String,
    pub mode: EstimateMode,
    /// Camera whose axes the error decomposition uses, with its `T_W^C` at this frame.
    pub ref_camera: String,
    pub ref_extrinsics: RigidTransform,
    /// `T_O^W`, after depth refinement when that ran.
    pub world_pose: Option<RigidTransform>,
    pub estimate: PoseEstimate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<DepthOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: String,
}

pub fn write_estimates<W: Write>(mut out: W, records: &[EstimateRecord]) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Data(e.to_string());
    let json = |e: serde_json::Error| CliError::Data(e.to_string());
    serde_json::to_writer(&mut out, &Header { schema_version: SCHEMA_VERSION.into() }).map_err(json)?;
    writeln!(out).map_err(io)?;
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(json)?;
        writeln!(out).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_estimates<R: BufRead>(input: R, path: &Path) -> Result<Vec<EstimateRecord>, CliError> {
    let err = |line: usize, e: &dyn std::fmt::Display| CliError::Data(format!("{}:{}: {e}", path.display(), line + 1));
    let mut lines = input.lines().enumerate();
    let Some((i, header)) = lines.next() else {
        return Err(CliError::EmptyInput(path.display().to_string()));
    };
    let header: Header = serde_json::from_str(&header.map_err(|e| err(i, &e))?).map_err(|e| err(i, &e))?;
    check_schema(&header.schema_version).map_err(|e| err(0, &e))?;
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| err(i, &e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| err(i, &e))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mvpose::PoseStatus;
    use crate::sim::{make_rig, RigSpec};

    #[test]
    fn uncalibrated_rig_hides_truth() {
        let rig = make_rig(&RigSpec { hmd_count: 1, ..Default::default() }).unwrap();
        let file = RigFile::uncalibrated(&rig);
        file.validate().unwrap();
        assert!(file.cameras.iter().all(|c| c.extrinsics.is_none() && c.clock_offset.is_none()));
        assert!(file.camera("S").unwrap().is_mobile());
        let text = serde_json::to_string(&file).unwrap();
        assert!(!text.contains("extrinsics"));
        assert!(matches!(file.camera_models(), Err(CliError::Data(_))));
    }

    #[test]
    fn estimates_round_trip() {
        let rec = EstimateRecord {
            frame: 3,
            config: "OL+OR".into(),
            mode: EstimateMode::Multi,
            ref_camera: "OL".into(),
            ref_extrinsics: RigidTransform::identity(),
            world_pose: None,
            estimate: PoseEstimate::failed(PoseStatus::FailedTriangulation, vec!["OL".into(), "OR".into()]),
            depth: None,
            error: None,
        };
        let mut buf = Vec::new();
        write_estimates(&mut buf, std::slice::from_ref(&rec)).unwrap();
        let back = read_estimates(buf.as_slice(), Path::new("x")).unwrap();
        assert_eq!(back, [rec]);
        assert!(matches!(read_estimates(&b""[..], Path::new("x")), Err(CliError::EmptyInput(_))));
        assert!(read_estimates(&b"{\"schema_version\":\"2.0\"}\n"[..], Path::new("x")).is_err());
    }
}
