use std::io::{Read, Write};

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{MvPoseError, ObjectModel, Patch, PatchMask};
use crate::geometry::{CameraModel, RigidTransform};
use crate::robust::kabsch_points;

/// Depth window registered to a camera image: `data[r * width + c]` is the
/// depth in mm of pixel `(x + c, y + r)`; 0 marks an invalid measurement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthMap {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
    #[serde(skip)]
    pub data: Vec<u16>,
}

impl DepthMap {
    pub fn new(x: u32, y: u32, width: u32, height: u32) -> Self {
        Self { x, y, width, height, data: vec![0; (width * height) as usize] }
    }

    pub fn get(&self, col: u32, row: u32) -> u16 {
        self.data[(row * self.width + col) as usize]
    }

    pub fn set(&mut self, col: u32, row: u32, mm: u16) {
        self.data[(row * self.width + col) as usize] = mm;
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|d| **d > 0).count()
    }
}

/// Writes the raster as 16-bit little-endian millimeters, row-major.
pub fn write_depth_raster<W: Write>(mut out: W, depth: &DepthMap) -> std::io::Result<()> {
    let bytes: Vec<u8> = depth.data.iter().flat_map(|d| d.to_le_bytes()).collect();
    out.write_all(&bytes)
}

/// Reads a raster written by [`write_depth_raster`] into the given window.
pub fn read_depth_raster<R: Read>(mut input: R, x: u32, y: u32, width: u32, height: u32) -> Result<DepthMap, MvPoseError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let n = (width * height) as usize;
    if bytes.len() != 2 * n {
        return Err(MvPoseError::InvalidDistribution(format!("depth raster has {} bytes, expected {}", bytes.len(), 2 * n)));
    }
    let data = bytes.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
    Ok(DepthMap { x, y, width, height, data })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcpParams {
    pub max_iterations: usize,
    /// Fraction of closest matches kept per iteration.
    pub trim_fraction: f64,
    pub min_valid_pixels: usize,
    /// Depth and model points are evenly subsampled to at most this many.
    pub max_points: usize,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self { max_iterations: 30, trim_fraction: 0.7, min_valid_pixels: 50, max_points: 1500 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthStatus {
    Refined,
    InsufficientDepth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthRefinement {
    pub pose: RigidTransform,
    pub status: DepthStatus,
    pub valid_pixels: usize,
    pub iterations: usize,
    /// RMS distance of the kept matches at the last iteration, mm.
    pub rms_mm: f64,
}

fn stride_subsample<T: Copy>(v: &[T], max: usize) -> Vec<T> {
    let stride = v.len().div_ceil(max.max(1)).max(1);
    v.iter().step_by(stride).copied().collect()
}

/// Trimmed point-to-point ICP of the model against back-projected depth
/// pixels inside the mask. `pose` is `T_O^W`; the camera gives `T_W^C`.
pub fn refine_on_depth(
    pose: &RigidTransform,
    depth: &DepthMap,
    cam: &CameraModel,
    model: &ObjectModel,
    patch: &Patch,
    mask: &PatchMask,
    params: &IcpParams,
) -> DepthRefinement {
    let to_world = cam.extrinsics.inverse();
    let mut points = Vec::new();
    for r in 0..depth.height {
        for c in 0..depth.width {
            let z = depth.get(c, r);
            if z == 0 {
                continue;
            }
            let px = Vector2::new((depth.x + c) as f64 + 0.5, (depth.y + r) as f64 + 0.5);
            if !mask.get(patch, &px) {
                continue;
            }
            let n = cam.intrinsics.normalize(&px);
            let z = z as f64;
            points.push(to_world.apply(&Vector3::new(n.x * z, n.y * z, z)));
        }
    }
    let valid_pixels = points.len();
    if valid_pixels < params.min_valid_pixels.max(3) {
        return DepthRefinement { pose: *pose, status: DepthStatus::InsufficientDepth, valid_pixels, iterations: 0, rms_mm: f64::NAN };
    }
    let world = stride_subsample(&points, params.max_points);
    let model_pts = stride_subsample(&model.surface_points, 2 * params.max_points);
    let keep = ((params.trim_fraction.clamp(0.0, 1.0) * world.len() as f64).ceil() as usize).clamp(3, world.len());

    let mut current = *pose;
    let mut iterations = 0;
    let mut rms = f64::NAN;
    while iterations < params.max_iterations {
        iterations += 1;
        let inv = current.inverse();
        let mut matches: Vec<(f64, usize, usize)> = world
            .par_iter()
            .enumerate()
            .map(|(wi, q)| {
                let local = inv.apply(q);
                let (mi, d2) = model_pts
                    .iter()
                    .enumerate()
                    .map(|(k, m)| (k, (m - local).norm_squared()))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .expect("model has points");
                (d2, wi, mi)
            })
            .collect();
        matches.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        matches.truncate(keep);
        rms = (matches.iter().map(|m| m.0).sum::<f64>() / matches.len() as f64).sqrt();
        let src: Vec<_> = matches.iter().map(|m| model_pts[m.2]).collect();
        let dst: Vec<_> = matches.iter().map(|m| world[m.1]).collect();
        let Ok(next) = kabsch_points(&src, &dst, &vec![1.0; src.len()]) else { break };
        let delta = next.compose(&current.inverse());
        current = next;
        if delta.rotation_angle() < 1e-9 && delta.translation().norm() < 1e-6 {
            break;
        }
    }
    DepthRefinement { pose: current, status: DepthStatus::Refined, valid_pixels, iterations, rms_mm: rms }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raster_round_trip_is_little_endian() {
        let mut d = DepthMap::new(5, 6, 3, 2);
        d.set(0, 0, 0x0102);
        d.set(2, 1, 1700);
        let mut buf = Vec::new();
        write_depth_raster(&mut buf, &d).unwrap();
        assert_eq!(&buf[..2], &[0x02, 0x01]);
        assert_eq!(read_depth_raster(buf.as_slice(), 5, 6, 3, 2).unwrap(), d);
        assert!(read_depth_raster(&buf[..4], 5, 6, 3, 2).is_err());
    }
}
