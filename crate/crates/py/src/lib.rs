//! Python bindings. Poses, intrinsics and the object model are wrapped as
//! classes; the pipeline stages run on a working directory exactly like the
//! command-line tool.

use std::path::PathBuf;

use mvtrack::cli::commands::{self, EstimateFlags};
use mvtrack::cli::{CliError, RunConfig};
use mvtrack::eval::pose_errors_in;
use mvtrack::geometry::{CameraIntrinsics, RigidTransform};
use mvtrack::mvpose::{ObjectModel, PoseEstimate, PoseStatus};
use mvtrack::robust::{self, Correspondence2D3D, RansacParams};
use nalgebra::{Vector2, Vector3};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: CliError) -> PyErr {
    match e {
        CliError::Usage(m) | CliError::Config(m) => PyValueError::new_err(m),
        CliError::Data(m) | CliError::EmptyInput(m) => PyIOError::new_err(m),
        CliError::Solver(m) => PyRuntimeError::new_err(m),
    }
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Same precedence as the CLI: explicit seed over config seed, explicit
/// output over config output.
pub fn run_config(output: PathBuf, config: Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = match config {
        Some(path) => RunConfig::load(&path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = seed.or(cfg.seed) {
        cfg.apply_seed(seed);
    }
    cfg.output = output;
    cfg.validate()?;
    Ok(cfg)
}

#[pyclass(name = "RigidTransform", module = "mvtrack_py", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyRigidTransform {
    pub inner: RigidTransform,
}

#[pymethods]
impl PyRigidTransform {
    /// Rotation vector in radians, translation in millimeters.
    #[new]
    #[pyo3(signature = (rotation_vector = [0.0; 3], translation = [0.0; 3]))]
    fn new(rotation_vector: [f64; 3], translation: [f64; 3]) -> Self {
        Self { inner: RigidTransform::from_axis_angle(rotation_vector.into(), translation.into()) }
    }

    #[staticmethod]
    fn from_wxyz(wxyz: [f64; 4], translation: [f64; 3]) -> PyResult<Self> {
        RigidTransform::from_wxyz(wxyz, translation).map(|inner| Self { inner }).map_err(value_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text).map(|inner| Self { inner }).map_err(value_err)
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("transform serializes")
    }

    #[getter]
    fn translation(&self) -> [f64; 3] {
        (*self.inner.translation()).into()
    }

    #[getter]
    fn wxyz(&self) -> [f64; 4] {
        self.inner.wxyz()
    }

    #[getter]
    fn rotation_vector(&self) -> [f64; 3] {
        self.inner.rotation().scaled_axis().into()
    }

    fn matrix(&self) -> [[f64; 4]; 4] {
        let m = self.inner.to_matrix();
        std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
    }

    fn apply(&self, point: [f64; 3]) -> [f64; 3] {
        self.inner.apply(&point.into()).into()
    }

    /// `self.compose(other)` applies `other` first.
    fn compose(&self, other: &Self) -> Self {
        Self { inner: self.inner.compose(&other.inner) }
    }

    fn __matmul__(&self, other: &Self) -> Self {
        self.compose(other)
    }

    fn inverse(&self) -> Self {
        Self { inner: self.inner.inverse() }
    }

    /// Rotation angle in radians.
    fn rotation_angle(&self) -> f64 {
        self.inner.rotation_angle()
    }

    fn __repr__(&self) -> String {
        let t = self.inner.translation();
        let q = self.inner.wxyz();
        format!("RigidTransform(wxyz=[{:.6}, {:.6}, {:.6}, {:.6}], t=[{:.3}, {:.3}, {:.3}])", q[0], q[1], q[2], q[3], t.x, t.y, t.z)
    }
}

#[pyclass(name = "CameraIntrinsics", module = "mvtrack_py", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyCameraIntrinsics {
    pub inner: CameraIntrinsics,
}

#[pymethods]
impl PyCameraIntrinsics {
    #[new]
    fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> PyResult<Self> {
        let inner = CameraIntrinsics::pinhole(fx, fy, cx, cy, width, height);
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Pixel of a camera-frame point; raises for points behind the camera.
    fn project(&self, point: [f64; 3]) -> PyResult<[f64; 2]> {
        self.inner.project(&point.into()).map(Into::into).map_err(value_err)
    }

    fn matrix(&self) -> [[f64; 3]; 3] {
        let m = self.inner.matrix();
        std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
    }

    #[getter]
    fn size(&self) -> (u32, u32) {
        (self.inner.width, self.inner.height)
    }
}

#[pyclass(name = "ObjectModel", module = "mvtrack_py", frozen)]
pub struct PyObjectModel {
    pub inner: ObjectModel,
}

#[pymethods]
impl PyObjectModel {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: ObjectModel = serde_json::from_str(text).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn id(&self) -> &str {
        &self.inner.id
    }

    #[getter]
    fn diameter(&self) -> f64 {
        self.inner.diameter
    }

    #[getter]
    fn centroid(&self) -> [f64; 3] {
        self.inner.centroid().into()
    }

    fn surface_points(&self) -> Vec<[f64; 3]> {
        self.inner.surface_points.iter().map(|p| (*p).into()).collect()
    }

    fn vertices(&self) -> Vec<[f64; 3]> {
        self.inner.vertices.iter().map(|p| (*p).into()).collect()
    }
}

/// The synthetic drill used by the simulator.
#[pyfunction]
fn drill_model() -> PyObjectModel {
    PyObjectModel { inner: mvtrack::sim::drill_model() }
}

/// Weighted rigid fit `T` with `T * model ~ world`.
#[pyfunction]
#[pyo3(signature = (model_points, world_points, weights = None))]
fn kabsch(model_points: Vec<[f64; 3]>, world_points: Vec<[f64; 3]>, weights: Option<Vec<f64>>) -> PyResult<PyRigidTransform> {
    if model_points.len() != world_points.len() {
        return Err(PyValueError::new_err("model_points and world_points differ in length"));
    }
    let weights = weights.unwrap_or_else(|| vec![1.0; model_points.len()]);
    if weights.len() != model_points.len() {
        return Err(PyValueError::new_err("weights length does not match the points"));
    }
    let model: Vec<Vector3<f64>> = model_points.into_iter().map(Into::into).collect();
    let world: Vec<Vector3<f64>> = world_points.into_iter().map(Into::into).collect();
    robust::kabsch_points(&model, &world, &weights).map(|inner| PyRigidTransform { inner }).map_err(value_err)
}

/// Robust model-to-camera pose. Returns the pose and the inlier mask.
#[pyfunction]
#[pyo3(signature = (pixels, model_points, intrinsics, threshold = 2.0, seed = 0))]
fn ransac_pnp(
    py: Python<'_>,
    pixels: Vec<[f64; 2]>,
    model_points: Vec<[f64; 3]>,
    intrinsics: PyCameraIntrinsics,
    threshold: f64,
    seed: u64,
) -> PyResult<(PyRigidTransform, Vec<bool>)> {
    if pixels.len() != model_points.len() {
        return Err(PyValueError::new_err("pixels and model_points differ in length"));
    }
    let corr: Vec<_> = pixels
        .into_iter()
        .zip(model_points)
        .map(|(p, m)| Correspondence2D3D::new(Vector2::from(p), Vector3::from(m)))
        .collect();
    let params = RansacParams { seed, ..RansacParams::with_threshold(threshold) };
    let out = py.detach(|| robust::ransac_pnp(&corr, &intrinsics.inner, &params)).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok((PyRigidTransform { inner: out.model }, out.inliers))
}

/// Position, rotation and vertex errors of an object pose estimate.
/// Axis errors are expressed in `reference_extrinsics` (world to camera)
/// when given, otherwise in world axes.
#[pyfunction]
#[pyo3(signature = (estimate, truth, model, reference_extrinsics = None))]
fn pose_errors<'py>(
    py: Python<'py>,
    estimate: PyRigidTransform,
    truth: PyRigidTransform,
    model: &PyObjectModel,
    reference_extrinsics: Option<PyRigidTransform>,
) -> PyResult<Bound<'py, PyDict>> {
    let est = PoseEstimate {
        pose: Some(estimate.inner),
        score: 0.0,
        inlier_count: 0,
        status: PoseStatus::Ok,
        views_used: Vec::new(),
        correspondences_3d: 0,
    };
    let reference = reference_extrinsics.map_or_else(RigidTransform::identity, |r| r.inner);
    let r = pose_errors_in(0, "", &est, &truth.inner, &model.inner, &reference);
    let d = PyDict::new(py);
    d.set_item("delta_t_mm", r.delta_t_mm)?;
    d.set_item("delta_r_deg", r.delta_r_deg)?;
    d.set_item("add_mm", r.add_mm)?;
    d.set_item("axis_mm", (r.x_mm, r.y_mm, r.z_mm))?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (output, config = None, seed = None))]
fn simulate(py: Python<'_>, output: PathBuf, config: Option<PathBuf>, seed: Option<u64>) -> PyResult<()> {
    let cfg = run_config(output, config, seed).map_err(err)?;
    py.detach(|| commands::simulate(&cfg)).map_err(err)
}

/// `sync_groups` entries use the CLI form `NAME=REF,CAM,...`.
#[pyfunction]
#[pyo3(signature = (output, config = None, seed = None, sync_groups = Vec::new()))]
fn calibrate(py: Python<'_>, output: PathBuf, config: Option<PathBuf>, seed: Option<u64>, sync_groups: Vec<String>) -> PyResult<()> {
    let cfg = run_config(output, config, seed).map_err(err)?;
    let groups = sync_groups.iter().map(|g| commands::parse_sync_group(g)).collect::<Result<Vec<_>, _>>().map_err(err)?;
    py.detach(|| commands::calibrate(&cfg, &groups)).map_err(err)
}

/// `views` entries are camera subsets such as `"OL,OR,C"`.
#[pyfunction]
#[pyo3(signature = (output, config = None, seed = None, views = Vec::new(), single_view = false, multi_view = false, refine_depth = false))]
#[allow(clippy::too_many_arguments)]
fn estimate(
    py: Python<'_>,
    output: PathBuf,
    config: Option<PathBuf>,
    seed: Option<u64>,
    views: Vec<String>,
    single_view: bool,
    multi_view: bool,
    refine_depth: bool,
) -> PyResult<()> {
    let cfg = run_config(output, config, seed).map_err(err)?;
    let flags = EstimateFlags { views: views.iter().map(|v| commands::parse_views(v)).collect(), single_view, multi_view, refine_depth };
    py.detach(|| commands::estimate(&cfg, &flags)).map_err(err)
}

/// Returns the evaluation summary as JSON text.
#[pyfunction]
#[pyo3(signature = (output, config = None, seed = None))]
fn evaluate(py: Python<'_>, output: PathBuf, config: Option<PathBuf>, seed: Option<u64>) -> PyResult<String> {
    let cfg = run_config(output, config, seed).map_err(err)?;
    let summary = py.detach(|| commands::evaluate(&cfg)).map_err(err)?;
    serde_json::to_string(&summary).map_err(value_err)
}

#[pymodule]
fn mvtrack_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRigidTransform>()?;
    m.add_class::<PyCameraIntrinsics>()?;
    m.add_class::<PyObjectModel>()?;
    m.add_function(wrap_pyfunction!(drill_model, m)?)?;
    m.add_function(wrap_pyfunction!(kabsch, m)?)?;
    m.add_function(wrap_pyfunction!(ransac_pnp, m)?)?;
    m.add_function(wrap_pyfunction!(pose_errors, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
