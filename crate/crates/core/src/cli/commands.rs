use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::files::*;
use super::CliError;
use crate::calib::{
    calibrate_rig, estimate_mobile_offset, evaluate_calibration, write_residual_csv, CalibError, MobileSyncResult, RigCameraInput,
    StaticCalibResult, SyncGroup,
};
use crate::eval::{pose_errors_in, recall_curve, summarize, thresholds, write_records_csv, write_recall_csv, ConfigSummary, Metric};
use crate::geometry::{CameraModel, RigidTransform};
use crate::io::{create, open, read_json, write_json, SCHEMA_VERSION};
use crate::mvpose::{
    estimate_multi_view, estimate_single_view, read_depth_raster, read_distributions_jsonl, refine_on_depth, write_depth_raster,
    write_distributions_jsonl, CorrespondenceDistribution, ObjectModel, PoseEstimate, PoseStatus,
};
use crate::sim::{drill_model, make_rig, simulate_board, simulate_object, SimTruth, SyncGroupSpec};
use crate::trajectory::{read_corner_csv, write_corner_csv, CalibrationBoard, CornerObservationSequence, PoseTrack};

fn data(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn file_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn read_track(path: &Path) -> Result<PoseTrack, CliError> {
    PoseTrack::read_jsonl(open(path).map_err(data)?).map_err(|e| file_err(path, e))
}

pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let sim = &cfg.simulate;
    let rig = make_rig(&sim.rig).map_err(|e| CliError::Config(e.to_string()))?;
    sim.scene.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let board = CalibrationBoard::grid(sim.board.rows, sim.board.cols, sim.board.spacing)
        .map_err(|e| CliError::Config(format!("board: {e}")))?;
    let dir = &cfg.output;
    write_json(&dir.join(RIG), &RigFile::uncalibrated(&rig)).map_err(data)?;
    write_json(&dir.join(BOARD), &board).map_err(data)?;

    let mut board_frames = 0;
    if sim.board_sequence {
        let out = simulate_board(&rig, &board, &sim.scene).map_err(|e| CliError::Config(e.to_string()))?;
        out.board_track.write_jsonl(create(&dir.join(BOARD_TRACK)).map_err(data)?).map_err(data)?;
        for (id, track) in &out.hmd_tracks {
            track.write_jsonl(create(&dir.join(hmd_track_file(id))).map_err(data)?).map_err(data)?;
        }
        write_corner_csv(create(&dir.join(CORNERS)).map_err(data)?, &out.observations).map_err(data)?;
        board_frames = out.observations.iter().map(|o| o.frames.len()).sum();
    }

    let object = if sim.object {
        let model = drill_model();
        let out = simulate_object(&rig, &model, &sim.scene).map_err(|e| CliError::Config(e.to_string()))?;
        write_json(&dir.join(MODEL), &model).map_err(data)?;
        write_distributions_jsonl(create(&dir.join(CORRESPONDENCES)).map_err(data)?, &out.distributions()).map_err(data)?;
        let depth_dir = dir.join(DEPTH_DIR);
        if depth_dir.exists() {
            std::fs::remove_dir_all(&depth_dir).map_err(|e| file_err(&depth_dir, e))?;
        }
        for f in &out.frames {
            for v in &f.views {
                if let Some(d) = &v.depth {
                    let path = dir.join(depth_file(f.frame, &v.camera.id));
                    write_depth_raster(create(&path).map_err(data)?, d).map_err(|e| file_err(&path, e))?;
                }
            }
        }
        Some(out)
    } else {
        None
    };
    write_json(&dir.join(TRUTH), &SimTruth::new(&rig, object.as_ref())).map_err(data)?;
    let views: usize = object.as_ref().map_or(0, |o| o.frames.iter().map(|f| f.views.len()).sum());
    println!(
        "simulated {} cameras, {} board frames, {} object frames, {} views -> {}",
        rig.cameras.len(),
        board_frames,
        object.as_ref().map_or(0, |o| o.frames.len()),
        views,
        dir.display()
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraCalibration {
    pub camera_id: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub static_result: Option<StaticCalibResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mobile_result: Option<MobileSyncResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub schema_version: String,
    pub cameras: Vec<CameraCalibration>,
}

/// `NAME=A,B,C`; the first member is the reference.
pub fn parse_sync_group(arg: &str) -> Result<SyncGroupSpec, CliError> {
    let (name, members) = arg.split_once('=').ok_or_else(|| CliError::Usage(format!("--sync-group '{arg}': expected NAME=CAM,CAM")))?;
    let members: Vec<String> = members.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
    if name.is_empty() || members.is_empty() {
        return Err(CliError::Usage(format!("--sync-group '{arg}': expected NAME=CAM,CAM")));
    }
    Ok(SyncGroupSpec { name: name.to_string(), members })
}

fn sync_groups(rig: &RigFile, specs: &[SyncGroupSpec]) -> Vec<SyncGroup> {
    if !specs.is_empty() {
        return specs
            .iter()
            .map(|g| SyncGroup { name: g.name.clone(), reference: g.members[0].clone(), members: g.members.clone() })
            .collect();
    }
    let mut groups: Vec<SyncGroup> = Vec::new();
    for c in rig.cameras.iter().filter(|c| !c.is_mobile()) {
        let Some(name) = &c.sync_group else { continue };
        match groups.iter_mut().find(|g| &g.name == name) {
            Some(g) => g.members.push(c.id.clone()),
            None => groups.push(SyncGroup { name: name.clone(), reference: c.id.clone(), members: vec![c.id.clone()] }),
        }
    }
    groups
}

fn calib_error(e: CalibError) -> CliError {
    match e {
        CalibError::InvalidConfig(_) | CalibError::UnknownCamera(_) => CliError::Config(e.to_string()),
        CalibError::Track(_) => CliError::Data(e.to_string()),
        _ => CliError::Solver(e.to_string()),
    }
}

pub fn calibrate(cfg: &RunConfig, cli_groups: &[SyncGroupSpec]) -> Result<(), CliError> {
    let dir = &cfg.output;
    let rig: RigFile = read_json(&dir.join(RIG)).map_err(data)?;
    rig.validate()?;
    let board: CalibrationBoard = read_json(&dir.join(BOARD)).map_err(data)?;
    board.validate().map_err(|e| file_err(&dir.join(BOARD), e))?;
    let track = read_track(&dir.join(BOARD_TRACK))?;
    let corners_path = dir.join(CORNERS);
    let sequences = read_corner_csv(open(&corners_path).map_err(data)?).map_err(|e| file_err(&corners_path, e))?;
    for s in &sequences {
        if rig.camera(&s.camera_id).is_none() {
            return Err(file_err(&corners_path, format!("camera '{}' is not in the rig", s.camera_id)));
        }
    }
    let observations = |id: &str| {
        let seq = sequences.iter().find(|s| s.camera_id == id).cloned().unwrap_or_else(|| CornerObservationSequence::new(id));
        seq.split_holdout(cfg.calibrate.holdout_every)
    };

    let specs = if cli_groups.is_empty() { &cfg.calibrate.sync_groups } else { cli_groups };
    for g in specs {
        for m in &g.members {
            match rig.camera(m) {
                None => return Err(CliError::Config(format!("sync group '{}': unknown camera '{m}'", g.name))),
                Some(c) if c.is_mobile() => {
                    return Err(CliError::Config(format!("sync group '{}': camera '{m}' is head-mounted", g.name)))
                }
                _ => {}
            }
        }
    }
    let groups = sync_groups(&rig, specs);
    let sync = &cfg.calibrate.sync;

    let mut held_out = Vec::new();
    let inputs: Vec<RigCameraInput> = rig
        .cameras
        .iter()
        .filter(|c| !c.is_mobile())
        .map(|c| {
            let (keep, hold) = observations(&c.id);
            held_out.push(hold);
            RigCameraInput { camera_id: c.id.clone(), intrinsics: c.intrinsics, observations: keep }
        })
        .collect();
    let outcomes = if inputs.is_empty() { Vec::new() } else { calibrate_rig(&inputs, &groups, &track, &board, sync).map_err(calib_error)? };

    let mut calibrated = rig.clone();
    let mut entries = Vec::new();
    let mut failed = Vec::new();
    let mut models = Vec::new();
    for cam in &mut calibrated.cameras {
        let mut entry = CameraCalibration { camera_id: cam.id.clone(), status: "ok".into(), error: None, static_result: None, mobile_result: None };
        if let Some(hand_eye) = cam.hand_eye {
            let path = dir.join(hmd_track_file(&cam.id));
            let hmd = read_track(&path)?;
            let (keep, _) = observations(&cam.id);
            match estimate_mobile_offset(&keep, &track, &hmd, &hand_eye, &board, &cam.intrinsics, sync) {
                Ok(r) => {
                    println!("{:<4} offset {:+9.3} ms  reproj {:.3} px  (head-mounted)", cam.id, r.clock_offset * 1e3, r.mean_reproj_error);
                    cam.clock_offset = Some(r.clock_offset);
                    entry.mobile_result = Some(r);
                }
                Err(e) => {
                    entry.status = "failed".into();
                    entry.error = Some(e.to_string());
                }
            }
        } else {
            let outcome = outcomes.iter().find(|o| o.camera_id == cam.id).expect("every static camera has an outcome");
            match &outcome.result {
                Ok(r) => {
                    println!(
                        "{:<4} offset {:+9.3} ms{} reproj {:.3} px  inliers {:.1}%",
                        cam.id,
                        r.clock_offset * 1e3,
                        if r.offset_fixed { " (group)" } else { "        " },
                        r.mean_reproj_error,
                        100.0 * r.inlier_ratio
                    );
                    cam.extrinsics = Some(r.extrinsics);
                    cam.clock_offset = Some(r.clock_offset);
                    let mut m = r.camera_model(cam.intrinsics);
                    m.sync_group = cam.sync_group.clone();
                    models.push(m);
                    entry.static_result = Some(r.clone());
                }
                Err(e) => {
                    entry.status = "failed".into();
                    entry.error = Some(e.to_string());
                }
            }
        }
        if let Some(e) = &entry.error {
            println!("{:<4} FAILED: {e}", cam.id);
            failed.push(format!("{}: {e}", cam.id));
        }
        entries.push(entry);
    }
    write_json(&dir.join(CALIBRATED_RIG), &calibrated).map_err(data)?;
    write_json(&dir.join(CALIBRATION), &CalibrationFile { schema_version: SCHEMA_VERSION.into(), cameras: entries }).map_err(data)?;
    let report = evaluate_calibration(&models, &held_out, &track, &board, sync.max_track_gap);
    write_json(&dir.join(CALIB_REPORT), &report).map_err(data)?;
    write_residual_csv(create(&dir.join(CALIB_RESIDUALS)).map_err(data)?, &report).map_err(data)?;
    for c in &report.cameras {
        println!(
            "{:<4} held-out: reproj mean {:.3} px (p95 {:.3}), position {:.3} mm (depth {:.3}, x {:.3}, y {:.3})",
            c.camera_id, c.reproj_mean_px, c.reproj_p95_px, c.position_mean_mm, c.depth_error_mm, c.x_error_mm, c.y_error_mm
        );
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Solver(format!("{} camera(s) failed: {}", failed.len(), failed.join("; "))))
    }
}

pub struct EstimateFlags {
    pub views: Vec<Vec<String>>,
    pub single_view: bool,
    pub multi_view: bool,
    pub refine_depth: bool,
}

pub fn parse_views(arg: &str) -> Vec<String> {
    arg.split([',', '+']).map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

struct EstimateContext<'a> {
    dir: &'a Path,
    cfg: &'a RunConfig,
    cameras: Vec<CameraModel>,
    model: ObjectModel,
    refine_depth: bool,
}

impl EstimateContext<'_> {
    fn camera_at(&self, id: &str, dist: Option<&CorrespondenceDistribution>) -> CameraModel {
        let mut cam = self.cameras.iter().find(|c| c.id == id).cloned().expect("validated camera id");
        if let Some(pose) = dist.and_then(|d| d.camera_pose) {
            cam.extrinsics = pose;
        }
        cam
    }

    fn refine(&self, record: &mut EstimateRecord, dist: &CorrespondenceDistribution, cam: &CameraModel) {
        let Some(pose) = record.world_pose else { return };
        let path = self.dir.join(depth_file(record.frame, &cam.id));
        let p = dist.patch;
        let depth = match open(&path).map_err(|e| e.to_string()).and_then(|r| read_depth_raster(r, p.x, p.y, p.width, p.height).map_err(|e| e.to_string())) {
            Ok(d) => d,
            Err(e) => {
                record.error = Some(format!("depth: {e}"));
                return;
            }
        };
        let r = refine_on_depth(&pose, &depth, cam, &self.model, &dist.patch, &dist.mask, &self.cfg.estimate.icp);
        record.depth = Some(DepthOutcome {
            status: r.status,
            valid_pixels: r.valid_pixels,
            iterations: r.iterations,
            rms_mm: r.rms_mm.is_finite().then_some(r.rms_mm),
            initial_pose: pose,
        });
        record.world_pose = Some(r.pose);
    }

    fn multi(&self, frame: u64, dists: &[CorrespondenceDistribution], subset: &[String]) -> EstimateRecord {
        let views: Vec<CorrespondenceDistribution> = subset.iter().filter_map(|id| dists.iter().find(|d| &d.camera_id == id).cloned()).collect();
        let ref_dist = views.first();
        let ref_id = ref_dist.map_or(subset[0].as_str(), |d| d.camera_id.as_str());
        let ref_cam = self.camera_at(ref_id, ref_dist);
        let ids: Vec<String> = views.iter().map(|d| d.camera_id.clone()).collect();
        let mut error = None;
        let estimate = if views.len() < 2 {
            PoseEstimate::failed(PoseStatus::NotEnoughViews, ids)
        } else {
            match estimate_multi_view(&views, &self.cameras, &self.cfg.estimate.multi, &self.model) {
                Ok(e) => e,
                Err(e) => {
                    error = Some(e.to_string());
                    PoseEstimate::failed(PoseStatus::InvalidInput, ids)
                }
            }
        };
        let mut record = EstimateRecord {
            frame,
            config: subset.join("+"),
            mode: EstimateMode::Multi,
            ref_camera: ref_cam.id.clone(),
            ref_extrinsics: ref_cam.extrinsics,
            world_pose: estimate.pose,
            estimate,
            depth: None,
            error,
        };
        if self.refine_depth {
            if let Some(d) = ref_dist {
                self.refine(&mut record, d, &ref_cam);
            }
        }
        record
    }

    fn single(&self, dist: &CorrespondenceDistribution) -> EstimateRecord {
        let cam = self.camera_at(&dist.camera_id, Some(dist));
        let (estimate, error) = match dist.validate() {
            Ok(()) => (estimate_single_view(dist, &cam.intrinsics, &self.cfg.estimate.single, &self.model), None),
            Err(e) => (PoseEstimate::failed(PoseStatus::InvalidInput, vec![cam.id.clone()]), Some(e.to_string())),
        };
        let world_pose = estimate.pose.map(|p| cam.extrinsics.inverse().compose(&p));
        let mut record = EstimateRecord {
            frame: dist.frame,
            config: cam.id.clone(),
            mode: EstimateMode::Single,
            ref_camera: cam.id.clone(),
            ref_extrinsics: cam.extrinsics,
            world_pose,
            estimate,
            depth: None,
            error,
        };
        if self.refine_depth {
            self.refine(&mut record, dist, &cam);
        }
        record
    }
}

pub fn estimate(cfg: &RunConfig, flags: &EstimateFlags) -> Result<(), CliError> {
    let dir = &cfg.output;
    let rig: RigFile = read_json(&dir.join(&cfg.estimate.rig)).map_err(data)?;
    rig.validate()?;
    let mut subsets = if flags.views.is_empty() { cfg.estimate.views.clone() } else { flags.views.clone() };
    if subsets.is_empty() {
        subsets.push(rig.cameras.iter().map(|c| c.id.clone()).collect());
    }
    for s in &subsets {
        if s.is_empty() {
            return Err(CliError::Config("empty camera subset".into()));
        }
        for id in s {
            if rig.camera(id).is_none() {
                return Err(CliError::Config(format!("unknown camera '{id}' in views")));
            }
        }
        let mut u = s.clone();
        u.sort();
        u.dedup();
        if u.len() != s.len() {
            return Err(CliError::Config(format!("repeated camera in views '{}'", s.join("+"))));
        }
    }
    let (multi, single) = if flags.single_view || flags.multi_view {
        (flags.multi_view, flags.single_view)
    } else {
        (cfg.estimate.multi_view, cfg.estimate.single_view)
    };
    if multi {
        if let Some(s) = subsets.iter().find(|s| s.len() < 2) {
            return Err(CliError::Config(format!("multi-view subset '{}' needs at least 2 cameras", s.join("+"))));
        }
    }
    let used: Vec<&String> = subsets.iter().flatten().collect();
    let cameras = RigFile { cameras: rig.cameras.iter().filter(|c| used.contains(&&c.id)).cloned().collect(), ..rig.clone() }.camera_models()?;
    let model: ObjectModel = read_json(&dir.join(MODEL)).map_err(data)?;
    model.validate().map_err(|e| file_err(&dir.join(MODEL), e))?;
    let corr_path = dir.join(CORRESPONDENCES);
    let dists = read_distributions_jsonl(open(&corr_path).map_err(data)?).map_err(|e| file_err(&corr_path, e))?;
    let mut frames: BTreeMap<u64, Vec<CorrespondenceDistribution>> = BTreeMap::new();
    for d in dists {
        if rig.camera(&d.camera_id).is_none() {
            return Err(file_err(&corr_path, format!("camera '{}' is not in the rig", d.camera_id)));
        }
        frames.entry(d.frame).or_default().push(d);
    }
    let ctx = EstimateContext { dir, cfg, cameras, model, refine_depth: flags.refine_depth || cfg.estimate.refine_depth };
    let frames: Vec<(u64, Vec<CorrespondenceDistribution>)> = frames.into_iter().collect();
    let single_ids: Vec<&String> = {
        let mut ids = used.clone();
        ids.sort();
        ids.dedup();
        ids
    };
    let records: Vec<EstimateRecord> = frames
        .par_iter()
        .flat_map_iter(|(frame, dists)| {
            let mut out = Vec::new();
            if multi {
                out.extend(subsets.iter().map(|s| ctx.multi(*frame, dists, s)));
            }
            if single {
                out.extend(dists.iter().filter(|d| single_ids.contains(&&d.camera_id)).map(|d| ctx.single(d)));
            }
            out
        })
        .collect();
    write_estimates(create(&dir.join(ESTIMATES)).map_err(data)?, &records)?;
    let mut counts: Vec<(String, usize, usize)> = Vec::new();
    for r in &records {
        if let Some(e) = &r.error {
            eprintln!("frame {} [{}]: {e}", r.frame, r.config);
        }
        match counts.iter_mut().find(|c| c.0 == r.config) {
            Some(c) => {
                c.1 += 1;
                c.2 += r.estimate.is_ok() as usize;
            }
            None => counts.push((r.config.clone(), 1, r.estimate.is_ok() as usize)),
        }
    }
    for (config, n, ok) in counts {
        println!("{config:<20} {ok}/{n} ok ({:.1}% failed)", 100.0 * (n - ok) as f64 / n as f64);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub schema_version: String,
    pub configs: Vec<ConfigSummary>,
}

pub fn evaluate(cfg: &RunConfig) -> Result<EvalSummary, CliError> {
    let dir = &cfg.output;
    let path = dir.join(ESTIMATES);
    let records = read_estimates(open(&path).map_err(data)?, &path)?;
    if records.is_empty() {
        return Err(CliError::EmptyInput(path.display().to_string()));
    }
    let truth: SimTruth = read_json(&dir.join(TRUTH)).map_err(data)?;
    crate::io::check_schema(&truth.schema_version).map_err(|e| file_err(&dir.join(TRUTH), e))?;
    let model: ObjectModel = read_json(&dir.join(MODEL)).map_err(data)?;
    let poses: BTreeMap<u64, RigidTransform> = truth.object_poses.iter().map(|p| (p.frame, p.pose)).collect();

    let mut configs: Vec<String> = Vec::new();
    let mut errors = Vec::with_capacity(records.len());
    for r in &records {
        let truth = poses.get(&r.frame).ok_or_else(|| file_err(&path, format!("frame {} has no ground truth", r.frame)))?;
        let mut est = r.estimate.clone();
        est.pose = r.world_pose.filter(|_| est.is_ok());
        errors.push(pose_errors_in(r.frame, &r.config, &est, truth, &model, &r.ref_extrinsics));
        if !configs.contains(&r.config) {
            configs.push(r.config.clone());
        }
    }
    write_records_csv(create(&dir.join(EVAL_RECORDS)).map_err(data)?, &errors).map_err(data)?;
    let mut summaries = Vec::new();
    for config in &configs {
        let rows: Vec<_> = errors.iter().filter(|e| &e.config == config).cloned().collect();
        summaries.push(summarize(config, &rows, model.diameter));
        let ev = &cfg.evaluate;
        for (metric, name, max, step) in [
            (Metric::Position, "position", ev.position_max_mm, ev.position_step_mm),
            (Metric::Rotation, "rotation", ev.rotation_max_deg, ev.rotation_step_deg),
            (Metric::Add, "add", ev.position_max_mm, ev.position_step_mm),
        ] {
            let curve = recall_curve(&rows, metric, &thresholds(max, step)).map_err(data)?;
            let p = dir.join(RECALL_DIR).join(format!("{config}_{name}.csv"));
            write_recall_csv(create(&p).map_err(data)?, config, &curve).map_err(data)?;
        }
    }
    let summary = EvalSummary { schema_version: SCHEMA_VERSION.into(), configs: summaries };
    write_json(&dir.join(EVAL_SUMMARY), &summary).map_err(data)?;
    println!("{:<20} {:>6} {:>7} {:>18} {:>18} {:>10}", "config", "frames", "fail%", "dt mm", "dR deg", "median dt");
    for s in &summary.configs {
        let ms = |m: &Option<crate::eval::MeanStd>| m.map_or("-".to_string(), |m| format!("{:.3} +- {:.3}", m.mean, m.std));
        println!(
            "{:<20} {:>6} {:>7.2} {:>18} {:>18} {:>10}",
            s.config,
            s.frames,
            100.0 * s.failure_rate,
            ms(&s.delta_t_mm),
            ms(&s.delta_r_deg),
            s.median_delta_t_mm.map_or("-".into(), |m| format!("{m:.3}"))
        );
    }
    Ok(summary)
}
