use std::f64::consts::PI;

use nalgebra::Vector3;

use crate::mvpose::ObjectModel;

const SPACING: f64 = 2.0;

enum Part {
    /// Cylinder along `axis` (0 = x, 2 = z) through `center` covering `lo..hi` on that axis.
    Cylinder { axis: usize, center: Vector3<f64>, radius: f64, lo: f64, hi: f64 },
    Cuboid { min: Vector3<f64>, max: Vector3<f64> },
}

impl Part {
    fn frame(axis: usize) -> (usize, usize) {
        if axis == 0 { (1, 2) } else { (0, 1) }
    }

    fn surface(&self) -> Vec<Vector3<f64>> {
        let mut out = Vec::new();
        match *self {
            Part::Cylinder { axis, center, radius, lo, hi } => {
                let (a, b) = Self::frame(axis);
                let ring = (2.0 * PI * radius / SPACING).ceil() as usize;
                let steps = ((hi - lo) / SPACING).ceil() as usize;
                let at = |s: f64, u: f64, v: f64| {
                    let mut p = center;
                    p[axis] = s;
                    p[a] += u;
                    p[b] += v;
                    p
                };
                for i in 0..=steps {
                    let s = lo + (hi - lo) * i as f64 / steps as f64;
                    for k in 0..ring {
                        let th = 2.0 * PI * (k as f64 + 0.5 * (i % 2) as f64) / ring as f64;
                        out.push(at(s, radius * th.cos(), radius * th.sin()));
                    }
                }
                let rings = (radius / SPACING).floor() as usize;
                for s in [lo, hi] {
                    out.push(at(s, 0.0, 0.0));
                    for r in 1..rings {
                        let rr = radius * r as f64 / rings as f64;
                        let n = (2.0 * PI * rr / SPACING).ceil() as usize;
                        for k in 0..n {
                            let th = 2.0 * PI * k as f64 / n as f64;
                            out.push(at(s, rr * th.cos(), rr * th.sin()));
                        }
                    }
                }
            }
            Part::Cuboid { min, max } => {
                let n: Vec<usize> = (0..3).map(|k| ((max[k] - min[k]) / SPACING).ceil() as usize).collect();
                let coord = |k: usize, i: usize| min[k] + (max[k] - min[k]) * i as f64 / n[k] as f64;
                for i in 0..=n[0] {
                    for j in 0..=n[1] {
                        for l in 0..=n[2] {
                            let on_face = i == 0 || i == n[0] || j == 0 || j == n[1] || l == 0 || l == n[2];
                            if on_face {
                                out.push(Vector3::new(coord(0, i), coord(1, j), coord(2, l)));
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Strictly inside, by more than `margin`.
    fn contains(&self, p: &Vector3<f64>, margin: f64) -> bool {
        match *self {
            Part::Cylinder { axis, center, radius, lo, hi } => {
                let (a, b) = Self::frame(axis);
                let r = ((p[a] - center[a]).powi(2) + (p[b] - center[b]).powi(2)).sqrt();
                r < radius - margin && p[axis] > lo + margin && p[axis] < hi - margin
            }
            Part::Cuboid { min, max } => (0..3).all(|k| p[k] > min[k] + margin && p[k] < max[k] - margin),
        }
    }
}

/// A cordless-drill-like object built from primitives: barrel along +x
/// ending in a chuck, a handle down -z, and a battery pack at its base.
/// Surface points are spaced about 2 mm apart; every tenth is a vertex.
pub fn drill_model() -> ObjectModel {
    let parts = [
        Part::Cylinder { axis: 0, center: Vector3::zeros(), radius: 22.0, lo: -80.0, hi: 80.0 },
        Part::Cylinder { axis: 0, center: Vector3::zeros(), radius: 10.0, lo: 80.0, hi: 120.0 },
        Part::Cylinder { axis: 2, center: Vector3::new(-20.0, 0.0, 0.0), radius: 16.0, lo: -130.0, hi: -18.0 },
        Part::Cuboid { min: Vector3::new(-50.0, -30.0, -150.0), max: Vector3::new(10.0, 30.0, -130.0) },
    ];
    let mut surface = Vec::new();
    for (i, part) in parts.iter().enumerate() {
        for p in part.surface() {
            let hidden = parts.iter().enumerate().any(|(j, other)| j != i && other.contains(&p, 0.5));
            if !hidden {
                surface.push(p);
            }
        }
    }
    let vertices = surface.iter().step_by(10).copied().collect();
    ObjectModel::new("drill", surface, vertices).expect("drill primitives are non-degenerate")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drill_shape() {
        let m = drill_model();
        assert!(m.surface_points.len() > 5000);
        assert_eq!(m.vertices.len(), m.surface_points.len().div_ceil(10));
        assert!(m.diameter > 200.0 && m.diameter < 260.0, "{}", m.diameter);
        // Nearest-neighbor spacing stays close to 2 mm.
        let sample: Vec<_> = m.surface_points.iter().step_by(97).collect();
        for p in sample {
            let nn = m.surface_points.iter().map(|q| (q - p).norm()).filter(|d| *d > 0.0).fold(f64::INFINITY, f64::min);
            assert!(nn < 2.6, "{nn}");
        }
    }
}
