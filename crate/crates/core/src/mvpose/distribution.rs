use std::io::{BufRead, Write};

use nalgebra::Vector2;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::MvPoseError;
use crate::geometry::RigidTransform;
use crate::io::{check_schema, SCHEMA_VERSION};
use crate::robust::Correspondence2D3D;

/// Image-space crop in which a view's object was detected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Patch {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl Patch {
    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= self.x as f64 && p.y >= self.y as f64 && p.x < (self.x + self.width) as f64 && p.y < (self.y + self.height) as f64
    }
}

/// Binary object mask on a grid of `cell x cell` pixel blocks covering a patch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    pub cell: u32,
    pub cols: u32,
    pub rows: u32,
    pub cells: Vec<bool>,
}

impl PatchMask {
    pub fn empty(patch: &Patch, cell: u32) -> Self {
        let cell = cell.max(1);
        let cols = patch.width.div_ceil(cell);
        let rows = patch.height.div_ceil(cell);
        Self { cell, cols, rows, cells: vec![false; (cols * rows) as usize] }
    }

    /// Cell index of an image pixel, if it falls on the grid.
    pub fn cell_of(&self, patch: &Patch, p: &Vector2<f64>) -> Option<usize> {
        let cx = ((p.x - patch.x as f64) / self.cell as f64).floor();
        let cy = ((p.y - patch.y as f64) / self.cell as f64).floor();
        if cx < 0.0 || cy < 0.0 || cx >= self.cols as f64 || cy >= self.rows as f64 {
            return None;
        }
        Some(cy as usize * self.cols as usize + cx as usize)
    }

    pub fn get(&self, patch: &Patch, p: &Vector2<f64>) -> bool {
        self.cell_of(patch, p).is_some_and(|i| self.cells[i])
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    /// Intersection over union; 0 when both masks are empty.
    pub fn iou(&self, other: &PatchMask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.cells.iter().zip(&other.cells) {
            inter += (*a && *b) as usize;
            union += (*a || *b) as usize;
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Run lengths of alternating values, starting with a (possibly empty) run of `false`.
    pub fn to_rle(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &c in &self.cells {
            if c == current {
                len += 1;
            } else {
                runs.push(len);
                current = c;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_rle(cell: u32, cols: u32, rows: u32, rle: &[u32]) -> Result<Self, String> {
        let mut cells = Vec::with_capacity((cols * rows) as usize);
        for (i, &run) in rle.iter().enumerate() {
            cells.extend(std::iter::repeat_n(i % 2 == 1, run as usize));
        }
        if cells.len() != (cols * rows) as usize || cell == 0 {
            return Err(format!("mask RLE covers {} cells, grid has {}", cells.len(), cols * rows));
        }
        Ok(Self { cell, cols, rows, cells })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskRepr {
    cell: u32,
    cols: u32,
    rows: u32,
    rle: Vec<u32>,
}

impl Serialize for PatchMask {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        MaskRepr { cell: self.cell, cols: self.cols, rows: self.rows, rle: self.to_rle() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for PatchMask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = MaskRepr::deserialize(d)?;
        PatchMask::from_rle(r.cell, r.cols, r.rows, &r.rle).map_err(serde::de::Error::custom)
    }
}

/// Marks the cells hit by `pixels`, dilated by one cell.
pub fn rasterize_silhouette<'a>(pixels: impl IntoIterator<Item = &'a Vector2<f64>>, patch: &Patch, cell: u32) -> PatchMask {
    let mut hit = PatchMask::empty(patch, cell);
    for p in pixels {
        if let Some(i) = hit.cell_of(patch, p) {
            hit.cells[i] = true;
        }
    }
    let (cols, rows) = (hit.cols as i64, hit.rows as i64);
    let mut out = hit.clone();
    for r in 0..rows {
        for c in 0..cols {
            if !hit.cells[(r * cols + c) as usize] {
                continue;
            }
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr >= 0 && cc >= 0 && rr < rows && cc < cols {
                        out.cells[(rr * cols + cc) as usize] = true;
                    }
                }
            }
        }
    }
    out
}

/// One view's predicted correspondences for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrespondenceDistribution {
    pub camera_id: String,
    pub frame: u64,
    pub timestamp: f64,
    pub patch: Patch,
    pub mask: PatchMask,
    /// `T_W^C` at this frame for cameras that move (self-tracked devices).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_pose: Option<RigidTransform>,
    pub samples: Vec<Correspondence2D3D>,
}

impl CorrespondenceDistribution {
    pub fn validate(&self) -> Result<(), MvPoseError> {
        let expect = PatchMask::empty(&self.patch, self.mask.cell);
        if (self.mask.cols, self.mask.rows) != (expect.cols, expect.rows) {
            return Err(MvPoseError::InvalidDistribution(format!("{}: mask grid does not match patch", self.camera_id)));
        }
        for s in &self.samples {
            if !(s.weight >= 0.0) || !s.weight.is_finite() {
                return Err(MvPoseError::InvalidDistribution(format!("{}: negative or non-finite weight", self.camera_id)));
            }
            if !self.patch.contains(&s.pixel) {
                return Err(MvPoseError::InvalidDistribution(format!(
                    "{}: sample pixel ({:.1}, {:.1}) outside patch",
                    self.camera_id, s.pixel.x, s.pixel.y
                )));
            }
        }
        Ok(())
    }

    pub fn total_weight(&self) -> f64 {
        self.samples.iter().map(|s| s.weight).sum()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StreamHeader {
    schema_version: String,
}

/// Writes a header line followed by one distribution per line.
pub fn write_distributions_jsonl<W: Write>(mut out: W, dists: &[CorrespondenceDistribution]) -> Result<(), MvPoseError> {
    let header = StreamHeader { schema_version: SCHEMA_VERSION.to_string() };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for d in dists {
        writeln!(out, "{}", serde_json::to_string(d).expect("distribution serializes"))?;
    }
    Ok(())
}

pub fn read_distributions_jsonl<R: BufRead>(input: R) -> Result<Vec<CorrespondenceDistribution>, MvPoseError> {
    let mut out = Vec::new();
    let mut header_seen = false;
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| MvPoseError::Parse { line: n + 1, message: e.to_string() };
        if !header_seen {
            let h: StreamHeader = serde_json::from_str(&line).map_err(parse_err)?;
            check_schema(&h.schema_version)?;
            header_seen = true;
            continue;
        }
        let d: CorrespondenceDistribution = serde_json::from_str(&line).map_err(parse_err)?;
        d.validate()?;
        out.push(d);
    }
    if !header_seen {
        return Err(MvPoseError::Parse { line: 1, message: "missing schema header".into() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn patch() -> Patch {
        Patch { x: 10, y: 20, width: 37, height: 23 }
    }

    #[test]
    fn rasterize_dilates_one_cell() {
        let p = patch();
        let m = rasterize_silhouette([Vector2::new(30.0, 35.0)].iter(), &p, 4);
        assert_eq!((m.cols, m.rows), (10, 6));
        assert_eq!(m.count(), 9);
        assert!(m.get(&p, &Vector2::new(30.0, 35.0)));
        assert!(!m.get(&p, &Vector2::new(9.0, 35.0)));
        assert_eq!(m.iou(&m), 1.0);
        assert_eq!(PatchMask::empty(&p, 4).iou(&PatchMask::empty(&p, 4)), 0.0);
    }

    #[test]
    fn jsonl_round_trip() {
        let p = patch();
        let mask = rasterize_silhouette([Vector2::new(20.0, 30.0), Vector2::new(40.0, 40.0)].iter(), &p, 4);
        let d = CorrespondenceDistribution {
            camera_id: "OL".into(),
            frame: 3,
            timestamp: 0.3,
            patch: p,
            mask,
            camera_pose: None,
            samples: vec![Correspondence2D3D::weighted(Vector2::new(20.5, 30.25), nalgebra::Vector3::new(1.0, 2.0, 3.0), 0.5)],
        };
        let mut buf = Vec::new();
        write_distributions_jsonl(&mut buf, std::slice::from_ref(&d)).unwrap();
        let back = read_distributions_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, vec![d]);
        let bad = b"{\"schema_version\":\"2.0\"}\n";
        assert!(matches!(read_distributions_jsonl(&bad[..]), Err(MvPoseError::Schema(_))));
    }

    #[test]
    fn samples_outside_patch_are_rejected() {
        let p = patch();
        let d = CorrespondenceDistribution {
            camera_id: "L".into(),
            frame: 0,
            timestamp: 0.0,
            patch: p,
            mask: PatchMask::empty(&p, 4),
            camera_pose: None,
            samples: vec![Correspondence2D3D::new(Vector2::new(0.0, 0.0), nalgebra::Vector3::zeros())],
        };
        assert!(d.validate().is_err());
    }

    proptest! {
        #[test]
        fn rle_round_trip(bits in proptest::collection::vec(any::<bool>(), 1..200), cols in 1u32..20) {
            let rows = (bits.len() as u32).div_ceil(cols);
            let mut cells = bits.clone();
            cells.resize((cols * rows) as usize, false);
            let m = PatchMask { cell: 2, cols, rows, cells };
            let back = PatchMask::from_rle(2, cols, rows, &m.to_rle()).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
