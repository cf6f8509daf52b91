use std::collections::{BTreeMap, HashMap};
use std::fmt::Display;

use nalgebra::{Matrix3, Matrix4, Vector3};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde_json::json;

use vgfm_core::eval::EvalConfig;
use vgfm_core::geometry::{
    BoundingBox, CameraMatrix, DualConic, DualQuadric, Ellipse2D, Ellipsoid3D, QuadricShape,
};
use vgfm_core::graph;
use vgfm_core::io::{method_results, ResultsFile, SceneFile, RESULTS_VERSION};
use vgfm_core::metrics;
use vgfm_core::scene::SceneConfig;
use vgfm_core::solver::{self, Method, ObjectTrack};

fn value_err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rows3(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

fn parse_method(name: &str) -> PyResult<Method> {
    name.parse().map_err(value_err)
}

#[pyclass(name = "Ellipse", frozen, from_py_object)]
#[derive(Clone)]
struct PyEllipse {
    inner: Ellipse2D,
}

#[pymethods]
impl PyEllipse {
    #[new]
    #[pyo3(signature = (center, axes, angle=0.0))]
    fn new(center: [f64; 2], axes: [f64; 2], angle: f64) -> PyResult<Self> {
        Ok(Self {
            inner: Ellipse2D::new(center, axes, angle).map_err(value_err)?,
        })
    }

    #[getter]
    fn center(&self) -> [f64; 2] {
        self.inner.center
    }

    #[getter]
    fn axes(&self) -> [f64; 2] {
        self.inner.semi_axes
    }

    #[getter]
    fn angle(&self) -> f64 {
        self.inner.orientation
    }

    /// Tight box as `(x_min, y_min, x_max, y_max)`.
    fn bbox(&self) -> [f64; 4] {
        let b = self.inner.bounding_box();
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }

    fn __repr__(&self) -> String {
        let e = &self.inner;
        format!(
            "Ellipse(center={:?}, axes={:?}, angle={})",
            e.center, e.semi_axes, e.orientation
        )
    }
}

#[pyclass(name = "Ellipsoid", frozen, from_py_object)]
#[derive(Clone)]
struct PyEllipsoid {
    inner: Ellipsoid3D,
}

#[pymethods]
impl PyEllipsoid {
    /// `rotation` columns are the axis directions.
    #[new]
    #[pyo3(signature = (center, axes, rotation=None))]
    fn new(center: [f64; 3], axes: [f64; 3], rotation: Option<[[f64; 3]; 3]>) -> PyResult<Self> {
        let r = match rotation {
            Some(rows) => Matrix3::from_fn(|i, j| rows[i][j]),
            None => Matrix3::identity(),
        };
        let inner = Ellipsoid3D::new(Vector3::from(center), axes, r).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn center(&self) -> [f64; 3] {
        self.inner.center.into()
    }

    #[getter]
    fn axes(&self) -> [f64; 3] {
        self.inner.semi_axes
    }

    #[getter]
    fn rotation(&self) -> [[f64; 3]; 3] {
        rows3(&self.inner.rotation)
    }

    fn volume(&self) -> f64 {
        self.inner.volume()
    }

    fn contains(&self, point: [f64; 3]) -> bool {
        self.inner.contains(&Vector3::from(point))
    }

    /// Dual quadric matrix, normalised so the last entry is -1.
    fn dual_quadric(&self) -> [[f64; 4]; 4] {
        let q = self.inner.dual_quadric();
        let m = q.matrix();
        std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
    }

    fn __repr__(&self) -> String {
        let e = &self.inner;
        format!(
            "Ellipsoid(center=[{}, {}, {}], axes={:?})",
            e.center.x, e.center.y, e.center.z, e.semi_axes
        )
    }
}

#[pyclass(name = "Camera", frozen, from_py_object)]
#[derive(Clone)]
struct PyCamera {
    inner: CameraMatrix,
}

#[pymethods]
impl PyCamera {
    /// From the 12 entries of the 3x4 projection matrix, row major.
    #[new]
    fn new(p: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: CameraMatrix::from_row_major(&p).map_err(value_err)?,
        })
    }

    /// `K [R | -R c]`; `rotation` maps world to camera coordinates.
    #[staticmethod]
    fn from_pose(
        intrinsics: [[f64; 3]; 3],
        rotation: [[f64; 3]; 3],
        center: [f64; 3],
    ) -> PyResult<Self> {
        let k = Matrix3::from_fn(|i, j| intrinsics[i][j]);
        let r = Matrix3::from_fn(|i, j| rotation[i][j]);
        let inner = CameraMatrix::from_pose(&k, &r, &Vector3::from(center)).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn p(&self) -> [f64; 12] {
        self.inner.row_major()
    }

    fn center(&self) -> PyResult<[f64; 3]> {
        Ok(self.inner.center().map_err(value_err)?.into())
    }

    /// Outline of the ellipsoid in this view.
    fn project(&self, ellipsoid: &PyEllipsoid) -> PyResult<PyEllipse> {
        let conic = self
            .inner
            .project(&ellipsoid.inner.dual_quadric())
            .map_err(value_err)?;
        Ok(PyEllipse {
            inner: conic.to_ellipse().map_err(value_err)?,
        })
    }

    /// Lower triangle (column major) of the normalised dual conic of the outline.
    fn project_conic(&self, ellipsoid: &PyEllipsoid) -> PyResult<Vec<f64>> {
        let conic = self
            .inner
            .project(&ellipsoid.inner.dual_quadric())
            .map_err(value_err)?;
        Ok(conic
            .normalized()
            .map_err(value_err)?
            .vech6()
            .iter()
            .copied()
            .collect())
    }

    fn __repr__(&self) -> String {
        format!("Camera(p={:?})", self.inner.row_major())
    }
}

/// Axis-aligned ellipse inscribed in `(x_min, y_min, x_max, y_max)`.
#[pyfunction]
fn ellipse_from_bbox(bbox: [f64; 4]) -> PyResult<PyEllipse> {
    let b = BoundingBox::new(bbox[0], bbox[1], bbox[2], bbox[3]).map_err(value_err)?;
    Ok(PyEllipse {
        inner: Ellipse2D::from_bbox(&b).map_err(value_err)?,
    })
}

/// Lower triangle (column major) of the normalised dual conic.
#[pyfunction]
fn dual_conic(ellipse: &PyEllipse) -> PyResult<Vec<f64>> {
    let c = DualConic::from_ellipse(&ellipse.inner)
        .normalized()
        .map_err(value_err)?;
    Ok(c.vech6().iter().copied().collect())
}

/// Ellipsoid encoded by a symmetric 4x4 dual quadric; raises if degenerate.
#[pyfunction]
fn decompose(quadric: [[f64; 4]; 4]) -> PyResult<PyEllipsoid> {
    let q = DualQuadric::from_matrix(Matrix4::from_fn(|i, j| quadric[i][j])).map_err(value_err)?;
    match q.decompose().map_err(value_err)? {
        QuadricShape::Ellipsoid(e) => Ok(PyEllipsoid { inner: e }),
        QuadricShape::Degenerate(d) => Err(PyValueError::new_err(format!(
            "quadric is not an ellipsoid, shape eigenvalues {:?}",
            d.eigenvalues
        ))),
    }
}

/// Estimates one ellipsoid per object from boxes observed in known cameras.
///
/// `detections` maps object id to a list of `(frame_id, bbox)`. Objects whose
/// estimate is not an ellipsoid map to `None`.
#[pyfunction]
#[pyo3(signature = (cameras, detections, method="lfdc"))]
fn localize(
    py: Python<'_>,
    cameras: HashMap<u32, PyCamera>,
    detections: HashMap<u32, Vec<(u32, [f64; 4])>>,
    method: &str,
) -> PyResult<BTreeMap<u32, Option<PyEllipsoid>>> {
    let method = parse_method(method)?;
    let cams: BTreeMap<_, _> = cameras.into_iter().map(|(k, c)| (k, c.inner)).collect();
    let mut tracks = Vec::with_capacity(detections.len());
    for (id, dets) in detections {
        let boxes = dets
            .into_iter()
            .map(|(f, b)| Ok((f, BoundingBox::new(b[0], b[1], b[2], b[3])?)))
            .collect::<Result<Vec<_>, vgfm_core::geometry::GeometryError>>()
            .map_err(value_err)?;
        tracks.push(ObjectTrack::from_bboxes(id, &boxes).map_err(value_err)?);
    }
    let solves = py.detach(|| solver::localize(method, &tracks, &cams));
    let mut out = BTreeMap::new();
    for s in solves {
        let result = s
            .result
            .map_err(|e| PyRuntimeError::new_err(format!("object {}: {e}", s.object_id)))?;
        out.insert(
            s.object_id,
            result.ellipsoid().map(|e| PyEllipsoid { inner: *e }),
        );
    }
    Ok(out)
}

/// Monte Carlo volumetric IoU; deterministic for a given seed.
#[pyfunction]
#[pyo3(signature = (a, b, samples=metrics::DEFAULT_IOU_SAMPLES, seed=0))]
fn iou_3d(
    py: Python<'_>,
    a: &PyEllipsoid,
    b: &PyEllipsoid,
    samples: usize,
    seed: u64,
) -> PyResult<f64> {
    if samples == 0 {
        return Err(PyValueError::new_err("samples must be positive"));
    }
    let (a, b) = (a.inner, b.inner);
    Ok(py.detach(|| metrics::iou_3d(&a, &b, samples, seed)))
}

/// Translation error and mean relative semi-axis error.
#[pyfunction]
fn pose_errors(estimate: &PyEllipsoid, truth: &PyEllipsoid) -> (f64, f64) {
    metrics::pose_metrics(&estimate.inner, &truth.inner)
}

/// Synthetic scene as a scene-file JSON document.
#[pyfunction]
#[pyo3(signature = (seed=0, objects=5, frames=6, span_deg=20.0, noise_px=0.0))]
fn generate_scene(
    seed: u64,
    objects: usize,
    frames: usize,
    span_deg: f64,
    noise_px: f64,
) -> PyResult<String> {
    let cfg = EvalConfig {
        seed,
        noise_px,
        scenes: 1,
        scene: SceneConfig {
            objects,
            frames,
            span_deg,
            ..SceneConfig::default()
        },
        ..EvalConfig::default()
    };
    cfg.validate().map_err(value_err)?;
    let scene = cfg.scene(0).map_err(value_err)?;
    Ok(SceneFile::from_synthetic(&scene, None).to_json())
}

/// Solves a scene-file JSON document and returns a results JSON document.
#[pyfunction]
#[pyo3(signature = (scene_json, method="both"))]
fn solve_scene(py: Python<'_>, scene_json: &str, method: &str) -> PyResult<String> {
    let methods = match method {
        "both" => vec![Method::Lfd, Method::Lfdc],
        m => vec![parse_method(m)?],
    };
    let problem = SceneFile::parse(scene_json)
        .and_then(|f| f.to_problem())
        .map_err(value_err)?;
    let results = py.detach(|| {
        methods
            .into_iter()
            .map(|m| {
                method_results(
                    m,
                    &solver::localize(m, &problem.tracks, &problem.cameras),
                    &problem,
                )
            })
            .collect()
    });
    let file = ResultsFile {
        version: RESULTS_VERSION.to_string(),
        config: json!({
            "tool": "vgfm",
            "tool_version": env!("CARGO_PKG_VERSION"),
            "command": "solve",
            "method": method,
        }),
        results,
    };
    Ok(file.to_json())
}

/// 42-value geometric descriptor of an ordered object pair.
#[pyfunction]
fn pair_geometric_feature(subject: &PyEllipsoid, object: &PyEllipsoid) -> Vec<f64> {
    graph::pair_geometric_feature(&subject.inner, &object.inner).to_vec()
}

#[pymodule]
pub fn vgfm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEllipse>()?;
    m.add_class::<PyEllipsoid>()?;
    m.add_class::<PyCamera>()?;
    m.add_function(wrap_pyfunction!(ellipse_from_bbox, m)?)?;
    m.add_function(wrap_pyfunction!(dual_conic, m)?)?;
    m.add_function(wrap_pyfunction!(decompose, m)?)?;
    m.add_function(wrap_pyfunction!(localize, m)?)?;
    m.add_function(wrap_pyfunction!(iou_3d, m)?)?;
    m.add_function(wrap_pyfunction!(pose_errors, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(solve_scene, m)?)?;
    m.add_function(wrap_pyfunction!(pair_geometric_feature, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
