use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use super::{SceneSpec, SimError, SimRig};
use crate::geometry::{CameraModel, RigidTransform};
use crate::mvpose::{rasterize_silhouette, CorrespondenceDistribution, DepthMap, ObjectModel, Patch};
use crate::robust::Correspondence2D3D;

const PLACEMENT_ATTEMPTS: usize = 1000;
const ZBUFFER_CELL: f64 = 2.0;
const VISIBILITY_TOLERANCE_MM: f64 = 5.0;
const PATCH_MARGIN: f64 = 16.0;
const DEPTH_WINDOW_MM: f64 = 3.0;
const OCCLUDER_STEP_MM: f64 = 25.0;
/// Views with fewer visible points are dropped.
const MIN_VISIBLE: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectView {
    /// The camera as it was at this frame.
    pub camera: CameraModel,
    pub distribution: CorrespondenceDistribution,
    pub depth: Option<DepthMap>,
    /// Samples drawn from the true surface, before outliers are added.
    pub inlier_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectFrame {
    pub frame: u64,
    pub timestamp: f64,
    /// `T_O^W`
    pub truth: RigidTransform,
    pub views: Vec<ObjectView>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSimulation {
    pub frames: Vec<ObjectFrame>,
}

impl ObjectSimulation {
    pub fn distributions(&self) -> Vec<CorrespondenceDistribution> {
        self.frames.iter().flat_map(|f| f.views.iter().map(|v| v.distribution.clone())).collect()
    }
}

/// Simulates object frames and, per visible view, the correspondence
/// distribution (inliers around the true projections plus uniform outliers),
/// the silhouette mask and optionally a depth crop.
pub fn simulate_object(rig: &SimRig, model: &ObjectModel, scene: &SceneSpec) -> Result<ObjectSimulation, SimError> {
    scene.validate()?;
    model.validate().map_err(|e| super::invalid("model", e.to_string()))?;
    let spacing = surface_spacing(model);
    let frames = (0..scene.frames as u64)
        .into_par_iter()
        .map(|frame| simulate_frame(rig, model, scene, frame, spacing))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ObjectSimulation { frames })
}

/// Mean nearest-neighbor distance over a subsample of the surface.
fn surface_spacing(model: &ObjectModel) -> f64 {
    let pts = &model.surface_points;
    let stride = (pts.len() / 200).max(1);
    let (sum, n) = pts.iter().step_by(stride).fold((0.0, 0usize), |(sum, n), p| {
        let d = pts.iter().map(|q| (q - p).norm_squared()).filter(|d| *d > 0.0).fold(f64::INFINITY, f64::min);
        (sum + d.sqrt(), n + 1)
    });
    sum / n as f64
}

fn random_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
}

fn place(rig: &SimRig, model: &ObjectModel, scene: &SceneSpec, t: f64, rng: &mut ChaCha8Rng) -> Result<RigidTransform, SimError> {
    let rotation = random_rotation(rng);
    let h = scene.object_half_extent;
    let [lo, hi] = scene.distance_range;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let c = Vector3::new(
            rng.random_range(-1.0..=1.0) * h[0],
            rng.random_range(-1.0..=1.0) * h[1],
            rng.random_range(-1.0..=1.0) * h[2],
        );
        let ok = (0..rig.cameras.len()).all(|i| {
            let d = rig.extrinsics_at(i, t).apply(&c).norm();
            d >= lo && d <= hi
        });
        if ok {
            return Ok(RigidTransform::new(rotation, c - rotation * model.centroid()));
        }
    }
    Err(SimError::Placement(PLACEMENT_ATTEMPTS))
}

fn simulate_frame(rig: &SimRig, model: &ObjectModel, scene: &SceneSpec, frame: u64, spacing: f64) -> Result<ObjectFrame, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ frame);
    let timestamp = frame as f64 / scene.camera_rate;
    let truth = place(rig, model, scene, timestamp, &mut rng)?;
    let n = model.surface_points.len();
    let pool = match scene.model_point_pool {
        k if k == 0 || k >= n => vec![true; n],
        k => {
            let mut pool = vec![false; n];
            for i in sample_indices(&mut rng, n, k) {
                pool[i] = true;
            }
            pool
        }
    };
    let mut views = Vec::new();
    for (index, base) in rig.cameras.iter().enumerate() {
        let mut camera = base.clone();
        camera.extrinsics = rig.extrinsics_at(index, timestamp);
        let mobile = rig.mobile(&camera.id).is_some();
        if let Some(view) = simulate_view(&camera, mobile, model, scene, frame, timestamp, &truth, spacing, &pool, &mut rng) {
            views.push(view);
        }
    }
    Ok(ObjectFrame { frame, timestamp, truth, views })
}

struct Projected {
    index: usize,
    pixel: Vector2<f64>,
    depth: f64,
}

fn splat_radius(camera: &CameraModel, spacing: f64, depth: f64) -> f64 {
    (camera.intrinsics.fx * spacing / depth).max(1.0)
}

/// Points whose depth is within tolerance of a splatted z-buffer.
fn visible_points(camera: &CameraModel, projected: &[Projected], spacing: f64) -> Vec<usize> {
    let (w, h) = (camera.intrinsics.width as f64, camera.intrinsics.height as f64);
    let cols = (w / ZBUFFER_CELL).ceil() as i64;
    let rows = (h / ZBUFFER_CELL).ceil() as i64;
    let mut zbuf = vec![f64::INFINITY; (cols * rows) as usize];
    let cell = |p: &Vector2<f64>| ((p.x / ZBUFFER_CELL).floor() as i64, (p.y / ZBUFFER_CELL).floor() as i64);
    for p in projected {
        let r = (splat_radius(camera, spacing, p.depth) / ZBUFFER_CELL).ceil().max(1.0) as i64;
        let (cx, cy) = cell(&p.pixel);
        for y in (cy - r).max(0)..=(cy + r).min(rows - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(cols - 1) {
                let z = &mut zbuf[(y * cols + x) as usize];
                *z = z.min(p.depth);
            }
        }
    }
    (0..projected.len())
        .filter(|&i| {
            let p = &projected[i];
            let (cx, cy) = cell(&p.pixel);
            cx >= 0 && cy >= 0 && cx < cols && cy < rows && p.depth <= zbuf[(cy * cols + cx) as usize] + VISIBILITY_TOLERANCE_MM
        })
        .collect()
}

fn bbox(pixels: impl Iterator<Item = Vector2<f64>>) -> (Vector2<f64>, Vector2<f64>) {
    pixels.fold((Vector2::repeat(f64::INFINITY), Vector2::repeat(f64::NEG_INFINITY)), |(lo, hi), p| (lo.inf(&p), hi.sup(&p)))
}

#[allow(clippy::too_many_arguments)]
fn simulate_view(
    camera: &CameraModel,
    mobile: bool,
    model: &ObjectModel,
    scene: &SceneSpec,
    frame: u64,
    timestamp: f64,
    truth: &RigidTransform,
    spacing: f64,
    pool: &[bool],
    rng: &mut ChaCha8Rng,
) -> Option<ObjectView> {
    let chain = camera.extrinsics.compose(truth);
    let intr = &camera.intrinsics;
    let projected: Vec<Projected> = model
        .surface_points
        .iter()
        .enumerate()
        .filter_map(|(index, x)| {
            let pc = chain.apply(x);
            if pc.z <= 1.0 {
                return None;
            }
            let pixel = intr.project(&pc).ok()?;
            intr.contains(&pixel).then_some(Projected { index, pixel, depth: pc.z })
        })
        .collect();
    let mut visible = visible_points(camera, &projected, spacing);
    if visible.len() < MIN_VISIBLE {
        return None;
    }

    if mobile && scene.truncation_fraction > 0.0 {
        let (lo, hi) = bbox(visible.iter().map(|&i| projected[i].pixel));
        let side = rng.random_range(0..4);
        let f = scene.truncation_fraction;
        visible.retain(|&i| {
            let p = projected[i].pixel;
            match side {
                0 => p.x >= lo.x + f * (hi.x - lo.x),
                1 => p.x <= hi.x - f * (hi.x - lo.x),
                2 => p.y >= lo.y + f * (hi.y - lo.y),
                _ => p.y <= hi.y - f * (hi.y - lo.y),
            }
        });
        if visible.len() < MIN_VISIBLE {
            return None;
        }
    }

    let (lo, hi) = bbox(visible.iter().map(|&i| projected[i].pixel));
    let x0 = (lo.x - PATCH_MARGIN).max(0.0).floor() as u32;
    let y0 = (lo.y - PATCH_MARGIN).max(0.0).floor() as u32;
    let x1 = ((hi.x + PATCH_MARGIN).ceil() as u32).min(intr.width);
    let y1 = ((hi.y + PATCH_MARGIN).ceil() as u32).min(intr.height);
    let patch = Patch { x: x0, y: y0, width: x1 - x0, height: y1 - y0 };

    let occlusion = scene.occlusion_for(&camera.id);
    let mut kept = visible.clone();
    if occlusion > 0.0 {
        let centroid = kept.iter().map(|&i| projected[i].pixel).sum::<Vector2<f64>>() / kept.len() as f64;
        let start = rng.random_range(0.0..std::f64::consts::TAU);
        let width = std::f64::consts::TAU * occlusion;
        kept.retain(|&i| {
            let d = projected[i].pixel - centroid;
            (d.y.atan2(d.x) - start).rem_euclid(std::f64::consts::TAU) >= width
        });
    }
    if kept.len() < MIN_VISIBLE {
        return None;
    }
    let mask = rasterize_silhouette(kept.iter().map(|&i| &projected[i].pixel), &patch, scene.mask_cell);

    let noise = Normal::new(0.0, scene.correspondence_sigma).expect("sigma is non-negative");
    let (px_lo, px_hi) = (
        Vector2::new(patch.x as f64, patch.y as f64),
        Vector2::new((patch.x + patch.width) as f64 - 1e-6, (patch.y + patch.height) as f64 - 1e-6),
    );
    let candidates: Vec<usize> = kept.iter().copied().filter(|&i| pool[projected[i].index]).collect();
    let n_in = candidates.len().min(scene.samples_per_view);
    let mut samples: Vec<Correspondence2D3D> = sample_indices(rng, candidates.len(), n_in)
        .into_iter()
        .map(|k| {
            let p = &projected[candidates[k]];
            let pixel = (p.pixel + Vector2::new(noise.sample(rng), noise.sample(rng))).sup(&px_lo).inf(&px_hi);
            Correspondence2D3D::weighted(pixel, model.surface_points[p.index], rng.random_range(0.5..1.5))
        })
        .collect();
    let f = scene.outlier_fraction;
    let n_out = (n_in as f64 * f / (1.0 - f)).round() as usize;
    for _ in 0..n_out {
        let pixel = Vector2::new(rng.random_range(px_lo.x..px_hi.x), rng.random_range(px_lo.y..px_hi.y));
        let point = model.surface_points[rng.random_range(0..model.surface_points.len())];
        samples.push(Correspondence2D3D::weighted(pixel, point, rng.random_range(0.5..1.5)));
    }
    let total: f64 = samples.iter().map(|s| s.weight).sum();
    for s in &mut samples {
        s.weight /= total;
    }

    let depth = scene.depth.then(|| render_depth(camera, &projected, &patch, scene, spacing, rng));
    let distribution = CorrespondenceDistribution {
        camera_id: camera.id.clone(),
        frame,
        timestamp,
        patch,
        mask,
        camera_pose: mobile.then_some(camera.extrinsics),
        samples,
    };
    Some(ObjectView { camera: camera.clone(), distribution, depth, inlier_count: n_in })
}

/// Depth crop over the patch: per pixel, the nearest-to-center surface
/// point among those within a few mm of the closest one, in whole mm.
fn render_depth(
    camera: &CameraModel,
    projected: &[Projected],
    patch: &Patch,
    scene: &SceneSpec,
    spacing: f64,
    rng: &mut ChaCha8Rng,
) -> DepthMap {
    let (w, h) = (patch.width as i64, patch.height as i64);
    let n = (w * h) as usize;
    let mut zmin = vec![f64::INFINITY; n];
    let mut best = vec![(f64::INFINITY, 0.0f64); n];
    let for_each_pixel = |p: &Projected, f: &mut dyn FnMut(usize, f64)| {
        let r = 0.5 * splat_radius(camera, spacing, p.depth);
        let lx = p.pixel.x - patch.x as f64;
        let ly = p.pixel.y - patch.y as f64;
        for y in ((ly - r - 0.5).floor() as i64).max(0)..=((ly + r - 0.5).ceil() as i64).min(h - 1) {
            for x in ((lx - r - 0.5).floor() as i64).max(0)..=((lx + r - 0.5).ceil() as i64).min(w - 1) {
                let d2 = (x as f64 + 0.5 - lx).powi(2) + (y as f64 + 0.5 - ly).powi(2);
                if d2 <= r * r {
                    f((y * w + x) as usize, d2);
                }
            }
        }
    };
    for p in projected {
        for_each_pixel(p, &mut |i, _| zmin[i] = zmin[i].min(p.depth));
    }
    for p in projected {
        for_each_pixel(p, &mut |i, d2| {
            if p.depth <= zmin[i] + DEPTH_WINDOW_MM && d2 < best[i].0 {
                best[i] = (d2, p.depth);
            }
        });
    }
    let noise = Normal::new(0.0, scene.depth_sigma).expect("sigma is non-negative");
    let band = (scene.depth_occluder_fraction * h as f64).round() as i64;
    let band_start = if band > 0 { rng.random_range(0..=h - band) } else { 0 };
    let mut map = DepthMap::new(patch.x, patch.y, patch.width, patch.height);
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            let (d2, z) = best[i];
            if !d2.is_finite() {
                continue;
            }
            let mut z = z + noise.sample(rng);
            if y >= band_start && y < band_start + band {
                z -= OCCLUDER_STEP_MM;
            }
            if rng.random_bool(scene.depth_invalid_fraction) {
                continue;
            }
            map.set(x as u32, y as u32, z.round().clamp(1.0, u16::MAX as f64) as u16);
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{drill_model, make_rig, RigSpec};

    fn scene(frames: usize) -> SceneSpec {
        SceneSpec { frames, correspondence_sigma: 0.0, outlier_fraction: 0.0, ..Default::default() }
    }

    #[test]
    fn placement_respects_distance_range() {
        let rig = make_rig(&RigSpec { hmd_count: 2, ..Default::default() }).unwrap();
        let model = drill_model();
        let sim = simulate_object(&rig, &model, &scene(10)).unwrap();
        for f in &sim.frames {
            let c = f.truth.apply(&model.centroid());
            for cam in &rig.cameras {
                let d = rig.extrinsics_at(rig.cameras.iter().position(|k| k.id == cam.id).unwrap(), f.timestamp).apply(&c).norm();
                assert!((400.0..=1700.0).contains(&d));
            }
        }
        let narrow = SceneSpec { distance_range: [400.0, 410.0], ..scene(1) };
        assert!(matches!(simulate_object(&rig, &model, &narrow), Err(SimError::Placement(_))));
    }

    #[test]
    fn noiseless_samples_reproject_and_weights_normalize() {
        let rig = make_rig(&RigSpec::default()).unwrap();
        let model = drill_model();
        let sim = simulate_object(&rig, &model, &scene(3)).unwrap();
        for f in &sim.frames {
            assert_eq!(f.views.len(), rig.cameras.len());
            for v in &f.views {
                let d = &v.distribution;
                d.validate().unwrap();
                assert!((d.total_weight() - 1.0).abs() < 1e-9);
                assert!(d.samples.len() >= 50, "{}", d.samples.len());
                for s in &d.samples {
                    let p = v.camera.project_world(&f.truth.apply(&s.model_point)).unwrap();
                    assert!((p - s.pixel).norm() < 1e-6);
                    assert!(d.mask.get(&d.patch, &s.pixel));
                }
            }
        }
    }

    #[test]
    fn outlier_mass_and_occlusion() {
        let rig = make_rig(&RigSpec::default()).unwrap();
        let model = drill_model();
        let s = SceneSpec { outlier_fraction: 0.4, occlusion_fraction: 0.5, ..scene(2) };
        let sim = simulate_object(&rig, &model, &s).unwrap();
        let clean = simulate_object(&rig, &model, &scene(2)).unwrap();
        for (f, g) in sim.frames.iter().zip(&clean.frames) {
            for (v, w) in f.views.iter().zip(&g.views) {
                let n = v.distribution.samples.len() as f64;
                let out = n - v.inlier_count as f64;
                assert!((out / n - 0.4).abs() < 0.02);
                assert!(v.distribution.mask.count() < w.distribution.mask.count());
            }
        }
    }

    #[test]
    fn depth_matches_truth_surface() {
        let rig = make_rig(&RigSpec::default()).unwrap();
        let model = drill_model();
        let s = SceneSpec { depth: true, ..scene(1) };
        let sim = simulate_object(&rig, &model, &s).unwrap();
        for v in &sim.frames[0].views {
            let d = v.depth.as_ref().unwrap();
            assert!(d.valid_count() > 500, "{}", d.valid_count());
            let truth = sim.frames[0].truth;
            let chain = v.camera.extrinsics.compose(&truth);
            let surface: Vec<_> = model.surface_points.iter().map(|p| chain.apply(p)).collect();
            // Back-projected pixels lie within a few mm of the surface.
            let mut errs = Vec::new();
            for r in (0..d.height).step_by(7) {
                for c in (0..d.width).step_by(7) {
                    let z = d.get(c, r) as f64;
                    if z == 0.0 {
                        continue;
                    }
                    let n = v.camera.intrinsics.normalize(&Vector2::new((d.x + c) as f64 + 0.5, (d.y + r) as f64 + 0.5));
                    let p = Vector3::new(n.x * z, n.y * z, z);
                    errs.push(surface.iter().map(|q| (q - p).norm()).fold(f64::INFINITY, f64::min));
                }
            }
            let mean = errs.iter().sum::<f64>() / errs.len() as f64;
            assert!(mean < 1.5, "{}: {mean}", v.camera.id);
        }
    }

    #[test]
    fn deterministic_under_parallelism() {
        let rig = make_rig(&RigSpec { hmd_count: 1, ..Default::default() }).unwrap();
        let model = drill_model();
        let s = SceneSpec { depth: true, depth_sigma: 1.0, outlier_fraction: 0.2, ..scene(4) };
        assert_eq!(simulate_object(&rig, &model, &s).unwrap(), simulate_object(&rig, &model, &s).unwrap());
    }
}
