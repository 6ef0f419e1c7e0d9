use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::calib::SyncSolveConfig;
use crate::mvpose::{IcpParams, MultiViewParams};
use crate::robust::RansacParams;
use crate::sim::{RigSpec, SceneSpec, SyncGroupSpec};

/// Whole-run configuration, read from TOML. Every section and field is
/// optional; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Overrides every seed below when set.
    pub seed: Option<u64>,
    /// Worker threads; all cores when unset.
    pub jobs: Option<usize>,
    /// Working directory all commands read from and write to.
    pub output: PathBuf,
    pub simulate: SimulateConfig,
    pub calibrate: CalibrateConfig,
    pub estimate: EstimateConfig,
    pub evaluate: EvaluateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            jobs: None,
            output: PathBuf::from("mvtrack_out"),
            simulate: SimulateConfig::default(),
            calibrate: CalibrateConfig::default(),
            estimate: EstimateConfig::default(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoardSpec {
    pub rows: u32,
    pub cols: u32,
    /// Corner spacing, mm.
    pub spacing: f64,
}

impl Default for BoardSpec {
    fn default() -> Self {
        Self { rows: 8, cols: 11, spacing: 20.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub rig: RigSpec,
    pub scene: SceneSpec,
    pub board: BoardSpec,
    /// Emit the board calibration sequence.
    pub board_sequence: bool,
    /// Emit object frames.
    pub object: bool,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { rig: RigSpec::default(), scene: SceneSpec::default(), board: BoardSpec::default(), board_sequence: true, object: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateConfig {
    pub sync: SyncSolveConfig,
    /// Every n-th board frame is held out for the report (0: none).
    pub holdout_every: usize,
    /// Replaces the rig file's sync-group labels when non-empty; the first member is the reference.
    pub sync_groups: Vec<SyncGroupSpec>,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        Self { sync: SyncSolveConfig::default(), holdout_every: 5, sync_groups: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateConfig {
    /// Rig file relative to the working directory.
    pub rig: PathBuf,
    /// Camera subsets for multi-view estimation; empty means all cameras.
    pub views: Vec<Vec<String>>,
    pub multi_view: bool,
    pub single_view: bool,
    pub refine_depth: bool,
    pub multi: MultiViewParams,
    pub single: RansacParams,
    pub icp: IcpParams,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            rig: PathBuf::from(super::files::CALIBRATED_RIG),
            views: Vec::new(),
            multi_view: true,
            single_view: false,
            refine_depth: false,
            multi: MultiViewParams::default(),
            single: RansacParams::with_threshold(3.0),
            icp: IcpParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub position_max_mm: f64,
    pub position_step_mm: f64,
    pub rotation_max_deg: f64,
    pub rotation_step_deg: f64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self { position_max_mm: 20.0, position_step_mm: 0.25, rotation_max_deg: 10.0, rotation_step_deg: 0.1 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Propagates the top-level seed into every seeded component.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.simulate.rig.seed = seed;
        self.simulate.scene.seed = seed;
        self.calibrate.sync.ransac.seed = seed;
        self.estimate.multi.ransac.seed = seed;
        self.estimate.single.seed = seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        self.simulate.scene.validate().map_err(|e| cfg(&e))?;
        self.calibrate.sync.validate().map_err(|e| cfg(&e))?;
        self.estimate.multi.validate().map_err(|e| cfg(&e))?;
        self.estimate.single.validate().map_err(|e| cfg(&e))?;
        let ev = &self.evaluate;
        if !(ev.position_step_mm > 0.0 && ev.rotation_step_deg > 0.0 && ev.position_max_mm > 0.0 && ev.rotation_max_deg > 0.0) {
            return Err(CliError::Config("evaluate thresholds must be positive".into()));
        }
        if self.jobs == Some(0) {
            return Err(CliError::Config("jobs must be >= 1".into()));
        }
        Ok(())
    }
}
