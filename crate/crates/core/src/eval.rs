//! Pose error metrics, recall curves and camera-subset ablations.
//!
//! Failed frames enter recall denominators and failure rates. Mean errors
//! are reported twice: over successful frames only, and "penalized", where a
//! failure counts as the model diameter (position, vertex error) and 180
//! degrees (rotation).

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{geodesic_distance, CameraModel, RigidTransform};
use crate::io::SCHEMA_VERSION;
use crate::mvpose::{estimate_multi_view, CorrespondenceDistribution, MultiViewParams, MvPoseError, ObjectModel, PoseEstimate, PoseStatus};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("unknown camera '{0}'")]
    UnknownCamera(String),
    #[error("invalid camera subset '{0}': multi-view needs at least 2 distinct cameras")]
    InvalidSubset(String),
    #[error("no records")]
    Empty,
    #[error(transparent)]
    MvPose(#[from] MvPoseError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseErrorRecord {
    pub frame: u64,
    /// Camera subset label such as `OL+OR+C`.
    pub config: String,
    pub status: PoseStatus,
    pub delta_t_mm: Option<f64>,
    pub delta_r_deg: Option<f64>,
    /// Mean model vertex displacement.
    pub add_mm: Option<f64>,
    /// `t_est - t_truth` in the reference camera's axes.
    pub x_mm: Option<f64>,
    pub y_mm: Option<f64>,
    pub z_mm: Option<f64>,
}

impl PoseErrorRecord {
    pub fn is_ok(&self) -> bool {
        self.status == PoseStatus::Ok
    }

    pub fn metric(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Position => self.delta_t_mm,
            Metric::Rotation => self.delta_r_deg,
            Metric::Add => self.add_mm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Position,
    Rotation,
    Add,
}

/// Errors of a world-frame estimate against the truth `T_O^W`. Estimates
/// without a pose yield a record carrying only the failure status.
pub fn pose_errors(
    frame: u64,
    config: &str,
    est: &PoseEstimate,
    truth: &RigidTransform,
    model: &ObjectModel,
    ref_cam: &CameraModel,
) -> PoseErrorRecord {
    pose_errors_in(frame, config, est, truth, model, &ref_cam.extrinsics)
}

/// [`pose_errors`] with the axis decomposition in the frame of `ref_extrinsics` (`T_W^C`).
pub fn pose_errors_in(
    frame: u64,
    config: &str,
    est: &PoseEstimate,
    truth: &RigidTransform,
    model: &ObjectModel,
    ref_extrinsics: &RigidTransform,
) -> PoseErrorRecord {
    let mut record = PoseErrorRecord {
        frame,
        config: config.to_string(),
        status: est.status,
        delta_t_mm: None,
        delta_r_deg: None,
        add_mm: None,
        x_mm: None,
        y_mm: None,
        z_mm: None,
    };
    let Some(pose) = est.pose.filter(|_| est.is_ok()) else {
        return record;
    };
    let dt = pose.translation() - truth.translation();
    let axes = ref_extrinsics.apply_vector(&dt);
    let add = model.vertices.iter().map(|v| (pose.apply(v) - truth.apply(v)).norm()).sum::<f64>() / model.vertices.len() as f64;
    record.delta_t_mm = Some(dt.norm());
    record.delta_r_deg = Some(geodesic_distance(pose.rotation(), truth.rotation()).to_degrees());
    record.add_mm = Some(add);
    record.x_mm = Some(axes.x);
    record.y_mm = Some(axes.y);
    record.z_mm = Some(axes.z);
    record
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallCurve {
    pub metric: Metric,
    pub thresholds: Vec<f64>,
    pub recall: Vec<f64>,
}

/// Fraction of all records (failed included) whose metric is within each threshold.
pub fn recall_curve(records: &[PoseErrorRecord], metric: Metric, thresholds: &[f64]) -> Result<RecallCurve, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut values: Vec<f64> = records.iter().filter(|r| r.is_ok()).filter_map(|r| r.metric(metric)).collect();
    values.sort_by(f64::total_cmp);
    let mut thresholds = thresholds.to_vec();
    thresholds.sort_by(f64::total_cmp);
    let recall = thresholds
        .iter()
        .map(|t| values.partition_point(|v| v <= t) as f64 / records.len() as f64)
        .collect();
    Ok(RecallCurve { metric, thresholds, recall })
}

/// Mean and population standard deviation; `None` for an empty input.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub config: String,
    pub frames: usize,
    pub failures: usize,
    pub failure_rate: f64,
    /// Over successful frames only.
    pub delta_t_mm: Option<MeanStd>,
    pub delta_r_deg: Option<MeanStd>,
    pub add_mm: Option<MeanStd>,
    pub median_delta_t_mm: Option<f64>,
    /// Mean absolute per-axis errors in the reference camera frame.
    pub axis_mean_mm: Option<[f64; 3]>,
    /// Failures counted as the model diameter and 180 degrees.
    pub penalized_delta_t_mm: f64,
    pub penalized_delta_r_deg: f64,
    pub penalized_add_mm: f64,
}

/// Aggregates one configuration's records.
pub fn summarize(config: &str, records: &[PoseErrorRecord], model_diameter: f64) -> ConfigSummary {
    let ok: Vec<&PoseErrorRecord> = records.iter().filter(|r| r.is_ok()).collect();
    let collect = |m: Metric| ok.iter().filter_map(|r| r.metric(m)).collect::<Vec<f64>>();
    let (dt, dr, add) = (collect(Metric::Position), collect(Metric::Rotation), collect(Metric::Add));
    let ms = |v: &[f64]| mean_std(v).map(|(mean, std)| MeanStd { mean, std });
    let failures = records.len() - ok.len();
    let n = records.len().max(1) as f64;
    let penalized = |v: &[f64], penalty: f64| (v.iter().sum::<f64>() + failures as f64 * penalty) / n;
    let axis_mean_mm = (!ok.is_empty()).then(|| {
        let mut s = [0.0; 3];
        for r in &ok {
            s[0] += r.x_mm.unwrap_or(0.0).abs();
            s[1] += r.y_mm.unwrap_or(0.0).abs();
            s[2] += r.z_mm.unwrap_or(0.0).abs();
        }
        s.map(|v| v / ok.len() as f64)
    });
    ConfigSummary {
        config: config.to_string(),
        frames: records.len(),
        failures,
        failure_rate: failures as f64 / n,
        delta_t_mm: ms(&dt),
        delta_r_deg: ms(&dr),
        add_mm: ms(&add),
        median_delta_t_mm: median(&dt),
        axis_mean_mm,
        penalized_delta_t_mm: penalized(&dt, model_diameter),
        penalized_delta_r_deg: penalized(&dr, 180.0),
        penalized_add_mm: penalized(&add, model_diameter),
    }
}

/// Lower median.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

/// All views of one object frame with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameData {
    pub frame: u64,
    pub truth: RigidTransform,
    pub distributions: Vec<CorrespondenceDistribution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: String,
    pub configs: Vec<ConfigSummary>,
    #[serde(skip)]
    pub records: Vec<PoseErrorRecord>,
}

pub fn subset_label(subset: &[String]) -> String {
    subset.join("+")
}

/// Runs multi-view estimation for every camera subset on every frame. A
/// subset with fewer than two views present in a frame counts as a failure.
pub fn ablation_report(
    frames: &[FrameData],
    cameras: &[CameraModel],
    subsets: &[Vec<String>],
    params: &MultiViewParams,
    model: &ObjectModel,
) -> Result<AblationReport, EvalError> {
    for subset in subsets {
        for id in subset {
            if !cameras.iter().any(|c| &c.id == id) {
                return Err(EvalError::UnknownCamera(id.clone()));
            }
        }
        let mut unique = subset.clone();
        unique.sort();
        unique.dedup();
        if unique.len() < 2 || unique.len() != subset.len() {
            return Err(EvalError::InvalidSubset(subset_label(subset)));
        }
    }
    params.validate()?;
    let mut configs = Vec::with_capacity(subsets.len());
    let mut records = Vec::new();
    for subset in subsets {
        let label = subset_label(subset);
        let rows = frames
            .par_iter()
            .map(|f| evaluate_subset(f, cameras, subset, &label, params, model))
            .collect::<Result<Vec<_>, _>>()?;
        configs.push(summarize(&label, &rows, model.diameter));
        records.extend(rows);
    }
    Ok(AblationReport { schema_version: SCHEMA_VERSION.to_string(), configs, records })
}

fn evaluate_subset(
    frame: &FrameData,
    cameras: &[CameraModel],
    subset: &[String],
    label: &str,
    params: &MultiViewParams,
    model: &ObjectModel,
) -> Result<PoseErrorRecord, EvalError> {
    let views: Vec<CorrespondenceDistribution> =
        frame.distributions.iter().filter(|d| subset.contains(&d.camera_id)).cloned().collect();
    let ids: Vec<String> = views.iter().map(|d| d.camera_id.clone()).collect();
    let est = if views.len() < 2 {
        PoseEstimate::failed(PoseStatus::NotEnoughViews, ids)
    } else {
        estimate_multi_view(&views, cameras, params, model)?
    };
    // Axis decomposition in the first subset camera's frame at this instant.
    let mut ref_cam = cameras.iter().find(|c| c.id == subset[0]).cloned().expect("validated subset");
    if let Some(pose) = frame.distributions.iter().find(|d| d.camera_id == subset[0]).and_then(|d| d.camera_pose) {
        ref_cam.extrinsics = pose;
    }
    Ok(pose_errors(frame.frame, label, &est, &frame.truth, model, &ref_cam))
}

pub fn write_records_csv<W: Write>(mut out: W, records: &[PoseErrorRecord]) -> Result<(), EvalError> {
    writeln!(out, "#schema_version={SCHEMA_VERSION}")?;
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_recall_csv<W: Write>(mut out: W, config: &str, curve: &RecallCurve) -> Result<(), EvalError> {
    writeln!(out, "#schema_version={SCHEMA_VERSION}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["config", "metric", "threshold", "recall"])?;
    let metric = serde_json::to_value(curve.metric)?.as_str().unwrap_or_default().to_string();
    for (t, r) in curve.thresholds.iter().zip(&curve.recall) {
        w.write_record([config, &metric, &t.to_string(), &r.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Evenly spaced thresholds `step, 2 step, ..., max`.
pub fn thresholds(max: f64, step: f64) -> Vec<f64> {
    let n = (max / step).round() as usize;
    (1..=n).map(|k| k as f64 * step).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraIntrinsics;
    use nalgebra::Vector3;
    use nalgebra::UnitQuaternion;
    use proptest::prelude::*;

    fn cube() -> ObjectModel {
        let pts: Vec<_> = (0..8).map(|i| Vector3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64) * 100.0).collect();
        ObjectModel::new("cube", pts.clone(), pts).unwrap()
    }

    fn camera() -> CameraModel {
        let ext = RigidTransform::look_at(Vector3::new(800.0, -300.0, 400.0), Vector3::zeros(), Vector3::z());
        CameraModel::new("OL", CameraIntrinsics::from_fov(90.0, 1280, 960), ext)
    }

    fn ok(pose: RigidTransform) -> PoseEstimate {
        PoseEstimate { pose: Some(pose), score: 0.0, inlier_count: 10, status: PoseStatus::Ok, views_used: vec![], correspondences_3d: 0 }
    }

    fn record(frame: u64, dt: Option<f64>) -> PoseErrorRecord {
        PoseErrorRecord {
            frame,
            config: "x".into(),
            status: if dt.is_some() { PoseStatus::Ok } else { PoseStatus::FailedTriangulation },
            delta_t_mm: dt,
            delta_r_deg: dt,
            add_mm: dt,
            x_mm: dt,
            y_mm: dt,
            z_mm: dt,
        }
    }

    #[test]
    fn exact_estimate_has_zero_error() {
        let truth = RigidTransform::from_axis_angle(Vector3::new(0.3, -0.2, 1.0), Vector3::new(10.0, 20.0, 30.0));
        let r = pose_errors(1, "a", &ok(truth), &truth, &cube(), &camera());
        assert_eq!(r.delta_t_mm, Some(0.0));
        assert!(r.delta_r_deg.unwrap() < 1e-6 && r.add_mm.unwrap() < 1e-9);
    }

    #[test]
    fn translation_along_camera_depth() {
        let cam = camera();
        let truth = RigidTransform::from_axis_angle(Vector3::new(0.1, 0.2, 0.3), Vector3::new(5.0, 6.0, 7.0));
        let dz = cam.optical_axis() * 3.0;
        let est = RigidTransform::new(*truth.rotation(), truth.translation() + dz);
        let r = pose_errors(0, "a", &ok(est), &truth, &cube(), &cam);
        assert!((r.delta_t_mm.unwrap() - 3.0).abs() < 1e-9);
        assert!((r.z_mm.unwrap() - 3.0).abs() < 1e-9);
        assert!(r.x_mm.unwrap().abs() < 1e-9 && r.y_mm.unwrap().abs() < 1e-9);
        assert!(r.delta_r_deg.unwrap() < 1e-6);
        assert!((r.add_mm.unwrap() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn rotation_about_centroid_matches_vertex_loop() {
        let model = cube();
        let truth = RigidTransform::from_axis_angle(Vector3::new(0.0, 0.5, 0.0), Vector3::new(1.0, 2.0, 3.0));
        let c = truth.apply(&model.centroid());
        let rot = UnitQuaternion::from_scaled_axis(Vector3::new(1.0, 1.0, 0.0).normalize() * 10f64.to_radians());
        // Rotate the placed object by 10 degrees about its world centroid.
        let est = RigidTransform::new(rot * truth.rotation(), rot * (truth.translation() - c) + c);
        let r = pose_errors(0, "a", &ok(est), &truth, &model, &camera());
        let mut sum = 0.0;
        for v in &model.vertices {
            let a = truth.apply(v);
            let b = rot * (a - c) + c;
            sum += (b - a).norm();
        }
        assert!((r.add_mm.unwrap() - sum / 8.0).abs() < 1e-9);
        assert!((r.delta_r_deg.unwrap() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn failed_estimate_carries_status_only() {
        let est = PoseEstimate::failed(PoseStatus::FailedTriangulation, vec![]);
        let r = pose_errors(3, "a", &est, &RigidTransform::identity(), &cube(), &camera());
        assert!(!r.is_ok() && r.delta_t_mm.is_none());
    }

    #[test]
    fn recall_examples() {
        let exact: Vec<_> = (0..4).map(|i| record(i, Some(0.0))).collect();
        assert_eq!(recall_curve(&exact, Metric::Position, &[0.5]).unwrap().recall, [1.0]);
        let mut half = exact.clone();
        half.extend((4..8).map(|i| record(i, None)));
        assert_eq!(recall_curve(&half, Metric::Position, &[0.5, 1e9]).unwrap().recall, [0.5, 0.5]);
        assert!(recall_curve(&[], Metric::Position, &[1.0]).is_err());
    }

    #[test]
    fn recall_matches_histogram_oracle() {
        let errs = [0.3, 1.7, 2.2, 2.2, 4.9, 7.5, 0.0, 3.3];
        let mut records: Vec<_> = errs.iter().enumerate().map(|(i, e)| record(i as u64, Some(*e))).collect();
        records.push(record(99, None));
        let th = thresholds(8.0, 1.0);
        let curve = recall_curve(&records, Metric::Position, &th).unwrap();
        // Histogram with unit bins, then cumulative sum.
        let mut bins = [0usize; 8];
        for e in errs {
            let b = if e == e.floor() && e > 0.0 { e as usize - 1 } else { e.floor() as usize };
            bins[b] += 1;
        }
        let mut acc = 0;
        for (k, b) in bins.iter().enumerate() {
            acc += b;
            assert_eq!(curve.recall[k], acc as f64 / 9.0, "threshold {}", th[k]);
        }
    }

    #[test]
    fn summary_conventions() {
        let records = vec![record(0, Some(1.0)), record(1, Some(3.0)), record(2, None), record(3, None)];
        let s = summarize("a", &records, 100.0);
        assert_eq!(s.failures, 2);
        assert_eq!(s.failure_rate, 0.5);
        assert_eq!(s.delta_t_mm, Some(MeanStd { mean: 2.0, std: 1.0 }));
        assert_eq!(s.penalized_delta_t_mm, (1.0 + 3.0 + 200.0) / 4.0);
        assert_eq!(s.penalized_delta_r_deg, (1.0 + 3.0 + 360.0) / 4.0);
        assert_eq!(s.median_delta_t_mm, Some(1.0));
    }

    #[test]
    fn ablation_rejects_bad_subsets() {
        let cams = vec![camera()];
        let model = cube();
        let p = MultiViewParams::default();
        assert!(matches!(ablation_report(&[], &cams, &[vec!["OL".into()]], &p, &model), Err(EvalError::InvalidSubset(_))));
        assert!(matches!(
            ablation_report(&[], &cams, &[vec!["OL".into(), "ZZ".into()]], &p, &model),
            Err(EvalError::UnknownCamera(id)) if id == "ZZ"
        ));
    }

    fn arb_pose() -> impl Strategy<Value = RigidTransform> {
        (prop::array::uniform3(-3.0..3.0f64), prop::array::uniform3(-500.0..500.0f64))
            .prop_map(|(r, t)| RigidTransform::from_axis_angle(Vector3::from(r), Vector3::from(t)))
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(a in arb_pose(), b in arb_pose()) {
            let (m, c) = (cube(), camera());
            let ab = pose_errors(0, "", &ok(a), &b, &m, &c);
            let ba = pose_errors(0, "", &ok(b), &a, &m, &c);
            prop_assert!((ab.delta_t_mm.unwrap() - ba.delta_t_mm.unwrap()).abs() < 1e-9);
            prop_assert!((ab.delta_r_deg.unwrap() - ba.delta_r_deg.unwrap()).abs() < 1e-6);
            prop_assert!((ab.add_mm.unwrap() - ba.add_mm.unwrap()).abs() < 1e-9);
            prop_assert!((0.0..=180.0).contains(&ab.delta_r_deg.unwrap()));
        }

        #[test]
        fn pure_translation_add_equals_dt(a in arb_pose(), d in prop::array::uniform3(-50.0..50.0f64)) {
            let b = RigidTransform::new(*a.rotation(), a.translation() + Vector3::from(d));
            let r = pose_errors(0, "", &ok(b), &a, &cube(), &camera());
            prop_assert!((r.add_mm.unwrap() - r.delta_t_mm.unwrap()).abs() < 1e-9);
        }

        #[test]
        fn recall_is_monotone_with_failure_asymptote(errs in prop::collection::vec(prop::option::of(0.0..20.0f64), 1..40)) {
            let records: Vec<_> = errs.iter().enumerate().map(|(i, e)| record(i as u64, *e)).collect();
            let curve = recall_curve(&records, Metric::Position, &thresholds(25.0, 0.5)).unwrap();
            prop_assert!(curve.recall.windows(2).all(|w| w[0] <= w[1]));
            let fail = errs.iter().filter(|e| e.is_none()).count() as f64 / errs.len() as f64;
            prop_assert!((curve.recall.last().unwrap() - (1.0 - fail)).abs() < 1e-12);
        }
    }
}
