use std::collections::BTreeMap;

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{fnv1a, invalid, SceneSpec, SimError, SimRig};
use crate::geometry::RigidTransform;
use crate::trajectory::{CalibrationBoard, Corner, CornerFrame, CornerObservationSequence, PoseTrack, TimedPose};

/// Largest angle between board normal and the direction to a camera at which corners are detected.
const MAX_VIEW_ANGLE_DEG: f64 = 75.0;
const MIN_CORNERS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BoardSimulation {
    /// `f_B^W` sampled at the tracker rate on the reference clock.
    pub board_track: PoseTrack,
    /// Per camera, in rig order, timestamps on each device clock.
    pub observations: Vec<CornerObservationSequence>,
    /// Marker tracks `f_H^W` of head-mounted cameras.
    pub hmd_tracks: BTreeMap<String, PoseTrack>,
}

/// Centripetal Catmull-Rom point on segment `p1 -> p2` at `u` in [0, 1].
fn centripetal(p0: Vector3<f64>, p1: Vector3<f64>, p2: Vector3<f64>, p3: Vector3<f64>, u: f64) -> Vector3<f64> {
    let knot = |a: Vector3<f64>, b: Vector3<f64>| (b - a).norm().sqrt().max(1e-6);
    let t1 = knot(p0, p1);
    let t2 = t1 + knot(p1, p2);
    let t3 = t2 + knot(p2, p3);
    let t = t1 + u * (t2 - t1);
    let lerp = |a: Vector3<f64>, b: Vector3<f64>, ta: f64, tb: f64| a * ((tb - t) / (tb - ta)) + b * ((t - ta) / (tb - ta));
    let a1 = lerp(p0, p1, 0.0, t1);
    let a2 = lerp(p1, p2, t1, t2);
    let a3 = lerp(p2, p3, t2, t3);
    let b1 = lerp(a1, a2, 0.0, t2);
    let b2 = lerp(a2, a3, t1, t3);
    lerp(b1, b2, t1, t2)
}

/// Arc-length parameterized Catmull-Rom path through random waypoints.
struct BoardPath {
    /// (arc length, position) table.
    table: Vec<(f64, Vector3<f64>)>,
    psi0: f64,
    phi0: f64,
}

impl BoardPath {
    fn new(rng: &mut ChaCha8Rng, scene: &SceneSpec, length: f64) -> Self {
        let half = Vector3::from(scene.workspace_half_extent);
        let spacing = scene.waypoint_spacing;
        let draw = |rng: &mut ChaCha8Rng| {
            Vector3::new(
                rng.random_range(-1.0..=1.0) * half.x,
                rng.random_range(-1.0..=1.0) * half.y,
                rng.random_range(-1.0..=1.0) * half.z,
            )
        };
        let mut waypoints = vec![draw(rng), draw(rng)];
        let mut table = vec![(0.0, waypoints[0])];
        let mut s = 0.0;
        while s <= length + spacing {
            let last = waypoints[waypoints.len() - 1];
            let heading = last - waypoints[waypoints.len() - 2];
            let mut next = draw(rng);
            // Spacing near the target and turns under 90 degrees keep the path smooth.
            for _ in 0..1000 {
                let d = (next - last).norm();
                if d > 0.5 * spacing && d < 1.5 * spacing && (next - last).dot(&heading) > 0.0 {
                    break;
                }
                next = draw(rng);
            }
            waypoints.push(next);
            let n = waypoints.len();
            if n < 4 {
                continue;
            }
            // Segment p1 -> p2 of the last four waypoints.
            let [p0, p1, p2, p3] = [waypoints[n - 4], waypoints[n - 3], waypoints[n - 2], waypoints[n - 1]];
            if table.len() == 1 {
                table[0].1 = p1;
            }
            let mut prev = p1;
            for k in 1..=64 {
                let p = centripetal(p0, p1, p2, p3, k as f64 / 64.0);
                s += (p - prev).norm();
                table.push((s, p));
                prev = p;
            }
        }
        Self { table, psi0: rng.random_range(0.0..std::f64::consts::TAU), phi0: rng.random_range(0.0..std::f64::consts::TAU) }
    }

    fn position(&self, s: f64) -> Vector3<f64> {
        let i = self.table.partition_point(|(a, _)| *a <= s).clamp(1, self.table.len() - 1);
        let (s0, p0) = self.table[i - 1];
        let (s1, p1) = self.table[i];
        let u = if s1 > s0 { ((s - s0) / (s1 - s0)).clamp(0.0, 1.0) } else { 0.0 };
        p0 + (p1 - p0) * u
    }

    fn pose(&self, s: f64) -> RigidTransform {
        let psi = self.psi0 + s / 500.0;
        let phi = 50f64.to_radians() + 15f64.to_radians() * (s / 700.0 + self.phi0).sin();
        let r = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), psi) * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), phi);
        RigidTransform::new(r, self.position(s))
    }
}

/// Simulates a tracked board moving through the rig's shared view and the
/// corners each camera detects, stamped on its own (offset) clock.
pub fn simulate_board(rig: &SimRig, board: &CalibrationBoard, scene: &SceneSpec) -> Result<BoardSimulation, SimError> {
    scene.validate()?;
    board.validate().map_err(|e| invalid("board", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    let speed = scene.board_speed * 1000.0;
    let path = BoardPath::new(&mut rng, scene, speed * scene.duration);
    let n = (scene.duration * scene.tracker_rate).round() as usize;
    let samples = (0..=n)
        .map(|k| {
            let t = k as f64 / scene.tracker_rate;
            TimedPose::new(t, path.pose(speed * t))
        })
        .collect();
    let board_track = PoseTrack::new("board", "world", samples).map_err(|e| invalid("tracker_rate", e.to_string()))?;

    let noise = Normal::new(0.0, scene.corner_sigma.max(0.0)).expect("sigma is non-negative");
    let cos_max = MAX_VIEW_ANGLE_DEG.to_radians().cos();
    let mut observations = Vec::with_capacity(rig.cameras.len());
    for (index, cam) in rig.cameras.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ fnv1a(&cam.id));
        let period = 1.0 / scene.camera_rate;
        let phase = rng.random_range(0.0..period);
        let mut seq = CornerObservationSequence::new(cam.id.clone());
        let first = ((cam.clock_offset.max(0.0) - phase) / period).floor().max(0.0) as i64 - 1;
        let mut k = first.max(0);
        loop {
            let t_dev = phase + k as f64 * period;
            let t_ref = t_dev + cam.clock_offset;
            k += 1;
            if t_ref < 0.0 {
                continue;
            }
            if t_ref > scene.duration {
                break;
            }
            let pose = board_track.interpolate(t_ref).expect("inside track span");
            let extrinsics = rig.extrinsics_at(index, t_ref);
            let center = extrinsics.inverse().apply(&Vector3::zeros());
            let normal = pose.apply_vector(&Vector3::z());
            let to_cam = (center - pose.translation()).normalize();
            if normal.dot(&to_cam) < cos_max {
                continue;
            }
            let chain = extrinsics.compose(&pose);
            let mut corners = Vec::new();
            for (id, p) in board.points.iter().enumerate() {
                let pc = chain.apply(p);
                if pc.z < 1.0 {
                    continue;
                }
                let Ok(px) = cam.intrinsics.project(&pc) else { continue };
                if !cam.intrinsics.contains(&px) {
                    continue;
                }
                let pixel = if rng.random_bool(scene.corner_outlier_fraction) {
                    Vector2::new(
                        rng.random_range(0.0..cam.intrinsics.width as f64),
                        rng.random_range(0.0..cam.intrinsics.height as f64),
                    )
                } else {
                    px + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng))
                };
                corners.push(Corner { point_id: id as u32, pixel });
            }
            if corners.len() >= MIN_CORNERS {
                seq.frames.push(CornerFrame { timestamp: t_dev, corners });
            }
        }
        observations.push(seq);
    }
    let hmd_tracks = rig
        .mobile
        .iter()
        .map(|m| (m.id.clone(), m.track(scene.duration, scene.tracker_rate)))
        .collect();
    Ok(BoardSimulation { board_track, observations, hmd_tracks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{make_rig, RigSpec};

    fn scene() -> SceneSpec {
        SceneSpec { duration: 10.0, corner_sigma: 0.0, ..Default::default() }
    }

    #[test]
    fn path_respects_speed_and_workspace() {
        let s = scene();
        let rig = make_rig(&RigSpec::default()).unwrap();
        let board = CalibrationBoard::grid(6, 8, 30.0).unwrap();
        let sim = simulate_board(&rig, &board, &s).unwrap();
        let samples = sim.board_track.samples();
        assert_eq!(samples.len(), 1001);
        for w in samples.windows(2) {
            let v = (w[1].pose.translation() - w[0].pose.translation()).norm() / (w[1].timestamp - w[0].timestamp);
            assert!((v - 300.0).abs() < 3.0, "{v} at {}", w[0].timestamp);
        }
        for p in samples {
            for k in 0..3 {
                assert!(p.pose.translation()[k].abs() <= s.workspace_half_extent[k] * 1.3);
            }
        }
    }

    #[test]
    fn noiseless_corners_reproject_exactly_with_offset() {
        let offsets = BTreeMap::from([("OL".to_string(), 0.12), ("C".to_string(), -0.05)]);
        let rig = make_rig(&RigSpec { clock_offsets: offsets, ..Default::default() }).unwrap();
        let board = CalibrationBoard::grid(6, 8, 30.0).unwrap();
        let sim = simulate_board(&rig, &board, &scene()).unwrap();
        for (cam, seq) in rig.cameras.iter().zip(&sim.observations) {
            assert!(seq.frames.len() > 10, "{}: {}", cam.id, seq.frames.len());
            seq.validate().unwrap();
            for f in &seq.frames {
                let pose = sim.board_track.interpolate(f.timestamp + cam.clock_offset).unwrap();
                for c in &f.corners {
                    let p = cam.project_world(&pose.apply(board.point(c.point_id).unwrap())).unwrap();
                    assert!((p - c.pixel).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn deterministic_and_static_when_speed_is_zero() {
        let rig = make_rig(&RigSpec::default()).unwrap();
        let board = CalibrationBoard::grid(6, 8, 30.0).unwrap();
        let s = SceneSpec { board_speed: 0.0, ..scene() };
        let a = simulate_board(&rig, &board, &s).unwrap();
        let b = simulate_board(&rig, &board, &s).unwrap();
        assert_eq!(a, b);
        let first = a.board_track.samples()[0].pose;
        assert!(a.board_track.samples().iter().all(|p| p.pose == first));
    }
}
