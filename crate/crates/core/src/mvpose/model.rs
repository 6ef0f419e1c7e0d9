use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::MvPoseError;
use crate::io::{check_schema, SCHEMA_VERSION};

/// Rigid object as point sets in its own frame (mm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectModel {
    pub schema_version: String,
    pub id: String,
    /// Points correspondences refer to.
    pub surface_points: Vec<Vector3<f64>>,
    /// Vertices used by the 3D vertex error.
    pub vertices: Vec<Vector3<f64>>,
    pub diameter: f64,
}

impl ObjectModel {
    /// Builds a model, taking the diameter as the largest vertex distance.
    pub fn new(id: impl Into<String>, surface_points: Vec<Vector3<f64>>, vertices: Vec<Vector3<f64>>) -> Result<Self, MvPoseError> {
        let mut diameter: f64 = 0.0;
        for (i, a) in vertices.iter().enumerate() {
            for b in &vertices[i + 1..] {
                diameter = diameter.max((a - b).norm());
            }
        }
        let model = Self { schema_version: SCHEMA_VERSION.to_string(), id: id.into(), surface_points, vertices, diameter };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), MvPoseError> {
        check_schema(&self.schema_version)?;
        if !(self.diameter > 0.0) {
            return Err(MvPoseError::InvalidModel("diameter must be positive".into()));
        }
        if self.vertices.is_empty() {
            return Err(MvPoseError::InvalidModel("no vertices".into()));
        }
        let pts = &self.surface_points;
        if pts.len() < 4 {
            return Err(MvPoseError::InvalidModel(format!("{} surface points, need >= 4", pts.len())));
        }
        let c = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
        let cov: Matrix3<f64> = pts.iter().map(|p| (p - c) * (p - c).transpose()).sum();
        let mut sv: Vec<f64> = cov.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        if sv[2] <= 1e-9 * sv[0] {
            return Err(MvPoseError::InvalidModel("surface points are coplanar".into()));
        }
        Ok(())
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.vertices.iter().sum::<Vector3<f64>>() / self.vertices.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tetra() -> Vec<Vector3<f64>> {
        vec![Vector3::zeros(), Vector3::x() * 10.0, Vector3::y() * 10.0, Vector3::z() * 10.0]
    }

    #[test]
    fn diameter_and_validation() {
        let m = ObjectModel::new("t", tetra(), tetra()).unwrap();
        assert!((m.diameter - 200f64.sqrt()).abs() < 1e-12);
        let flat = vec![Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::new(1.0, 1.0, 0.0)];
        assert!(matches!(ObjectModel::new("f", flat.clone(), flat), Err(MvPoseError::InvalidModel(_))));
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<ObjectModel>(&json).unwrap(), m);
    }
}
