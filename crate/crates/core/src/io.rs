//! JSON file formats: scenes (cameras, tracks, optional ground truth),
//! localisation results and pair features.
//!
//! Matrices are written row-major. Dual conics are written as the six
//! lower-triangle entries in column order of the matrix normalised so that
//! its last diagonal entry is -1.

use crate::geometry::{BoundingBox, CameraMatrix, DualConic, Ellipse2D, Ellipsoid3D, Vector6};
use crate::graph::pair_geometric_feature;
use crate::scene::SyntheticScene;
use crate::solver::{Detection, FrameId, Method, ObjectId, ObjectSolve, ObjectTrack, SolverError};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

pub const SCENE_VERSION: &str = "vgfm-scene/1";
pub const RESULTS_VERSION: &str = "vgfm-results/1";
pub const FEATURES_VERSION: &str = "vgfm-features/1";

/// Invalid input file. The message names the offending field.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{0}")]
pub struct InputError(pub String);

fn field_err(path: impl std::fmt::Display, msg: impl std::fmt::Display) -> InputError {
    InputError(format!("{path}: {msg}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub frame_id: FrameId,
    #[serde(rename = "P")]
    pub p: [f64; 12],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub frame_id: FrameId,
    /// `[x_min, y_min, x_max, y_max]` in pixels.
    pub bbox: [f64; 4],
    /// Exact dual conic of the outline, when known. Otherwise the ellipse
    /// inscribed in `bbox` is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conic: Option<[f64; 6]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackRecord {
    pub object_id: ObjectId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub detections: Vec<DetectionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllipsoidRecord {
    pub center: [f64; 3],
    pub axes: [f64; 3],
    /// Columns are the principal directions, written row-major.
    pub rotation: [f64; 9],
}

impl EllipsoidRecord {
    pub fn from_ellipsoid(e: &Ellipsoid3D) -> Self {
        let r = &e.rotation;
        Self {
            center: [e.center.x, e.center.y, e.center.z],
            axes: e.semi_axes,
            rotation: std::array::from_fn(|k| r[(k / 3, k % 3)]),
        }
    }

    pub fn to_ellipsoid(&self) -> Result<Ellipsoid3D, String> {
        Ellipsoid3D::new(
            Vector3::from(self.center),
            self.axes,
            Matrix3::from_row_slice(&self.rotation),
        )
        .map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthRecord {
    pub object_id: ObjectId,
    pub center: [f64; 3],
    pub axes: [f64; 3],
    pub rotation: [f64; 9],
}

impl GroundTruthRecord {
    pub fn new(object_id: ObjectId, e: &Ellipsoid3D) -> Self {
        let r = EllipsoidRecord::from_ellipsoid(e);
        Self {
            object_id,
            center: r.center,
            axes: r.axes,
            rotation: r.rotation,
        }
    }

    pub fn ellipsoid(&self) -> EllipsoidRecord {
        EllipsoidRecord {
            center: self.center,
            axes: self.axes,
            rotation: self.rotation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub version: String,
    /// Settings and seed that produced the file, if generated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<Value>,
    pub cameras: Vec<CameraRecord>,
    pub tracks: Vec<TrackRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Vec<GroundTruthRecord>>,
}

/// Validated contents of a scene file.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub cameras: BTreeMap<FrameId, CameraMatrix>,
    pub tracks: Vec<ObjectTrack>,
    pub ground_truth: BTreeMap<ObjectId, Ellipsoid3D>,
}

impl SceneFile {
    pub fn parse(text: &str) -> Result<Self, InputError> {
        let file: Self = serde_json::from_str(text)
            .map_err(|e| InputError(format!("invalid scene file: {e}")))?;
        if file.version != SCENE_VERSION {
            return Err(field_err(
                "version",
                format!("expected '{SCENE_VERSION}', got '{}'", file.version),
            ));
        }
        Ok(file)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scene serialises");
        s.push('\n');
        s
    }

    pub fn from_synthetic(scene: &SyntheticScene, config: Option<Value>) -> Self {
        let cameras = scene
            .cameras
            .iter()
            .map(|(&frame_id, c)| CameraRecord {
                frame_id,
                p: c.row_major(),
            })
            .collect();
        let tracks = scene
            .tracks
            .iter()
            .map(|t| TrackRecord {
                object_id: t.object_id,
                label: t.label.clone(),
                detections: t
                    .detections()
                    .iter()
                    .map(|d| {
                        let b = d.bbox.unwrap_or_else(|| {
                            d.conic.bounding_box().expect("detections are ellipses")
                        });
                        let v = d.conic.vech6();
                        DetectionRecord {
                            frame_id: d.frame_id,
                            bbox: [b.x_min, b.y_min, b.x_max, b.y_max],
                            conic: Some(std::array::from_fn(|k| v[k])),
                        }
                    })
                    .collect(),
            })
            .collect();
        let ground_truth = scene
            .objects
            .iter()
            .map(|o| GroundTruthRecord::new(o.object_id, &o.ellipsoid))
            .collect();
        Self {
            version: SCENE_VERSION.to_string(),
            config,
            cameras,
            tracks,
            ground_truth: Some(ground_truth),
        }
    }

    /// Checks every field and builds solver inputs.
    pub fn to_problem(&self) -> Result<Problem, InputError> {
        let mut cameras = BTreeMap::new();
        for (k, rec) in self.cameras.iter().enumerate() {
            let path = format!("cameras[{k}]");
            let cam = CameraMatrix::from_row_major(&rec.p)
                .map_err(|e| field_err(format!("{path}.P"), e))?;
            if cameras.insert(rec.frame_id, cam).is_some() {
                return Err(field_err(
                    format!("{path}.frame_id"),
                    format!("duplicate frame {}", rec.frame_id),
                ));
            }
        }
        let mut tracks = Vec::with_capacity(self.tracks.len());
        let mut ids = BTreeSet::new();
        for (k, rec) in self.tracks.iter().enumerate() {
            let path = format!("tracks[{k}]");
            if !ids.insert(rec.object_id) {
                return Err(field_err(
                    format!("{path}.object_id"),
                    format!("duplicate object {}", rec.object_id),
                ));
            }
            let mut detections = Vec::with_capacity(rec.detections.len());
            for (n, d) in rec.detections.iter().enumerate() {
                let dpath = format!("{path}.detections[{n}]");
                if !cameras.contains_key(&d.frame_id) {
                    return Err(field_err(
                        format!("{dpath}.frame_id"),
                        format!("frame {} has no camera", d.frame_id),
                    ));
                }
                let [x0, y0, x1, y1] = d.bbox;
                let bbox = BoundingBox::new(x0, y0, x1, y1)
                    .map_err(|e| field_err(format!("{dpath}.bbox"), e))?;
                let detection = match d.conic {
                    Some(v) => {
                        let conic = DualConic::from_vech6(&Vector6::from(v))
                            .normalized()
                            .and_then(|c| c.to_ellipse().map(|_| c))
                            .map_err(|e| field_err(format!("{dpath}.conic"), e))?;
                        Detection {
                            frame_id: d.frame_id,
                            conic,
                            bbox: Some(bbox),
                        }
                    }
                    None => Detection::from_bbox(d.frame_id, bbox)
                        .map_err(|e| field_err(format!("{dpath}.bbox"), e))?,
                };
                detections.push(detection);
            }
            let track = ObjectTrack::new(rec.object_id, detections)
                .map_err(|e| field_err(format!("{path}.detections"), e))?
                .with_label(rec.label.clone());
            tracks.push(track);
        }
        let mut ground_truth = BTreeMap::new();
        for (k, rec) in self.ground_truth.iter().flatten().enumerate() {
            let path = format!("ground_truth[{k}]");
            let e = rec
                .ellipsoid()
                .to_ellipsoid()
                .map_err(|e| field_err(&path, e))?;
            if ground_truth.insert(rec.object_id, e).is_some() {
                return Err(field_err(
                    format!("{path}.object_id"),
                    format!("duplicate object {}", rec.object_id),
                ));
            }
        }
        Ok(Problem {
            cameras,
            tracks,
            ground_truth,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipseRecord {
    pub center: [f64; 2],
    pub axes: [f64; 2],
    /// Angle of the first axis from the image x axis, radians.
    pub angle: f64,
}

impl From<&Ellipse2D> for EllipseRecord {
    fn from(e: &Ellipse2D) -> Self {
        Self {
            center: e.center,
            axes: e.semi_axes,
            angle: e.orientation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReprojectionRecord {
    pub frame_id: FrameId,
    /// `None` when the projected quadric is not an ellipse.
    pub ellipse: Option<EllipseRecord>,
    pub conic: Option<[f64; 6]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectResult {
    pub object_id: ObjectId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub valid: bool,
    /// Why the object has no valid ellipsoid.
    pub reason: Option<String>,
    pub ellipsoid: Option<EllipsoidRecord>,
    /// Normalised dual quadric, lower triangle in column order.
    pub quadric: Option<[f64; 10]>,
    pub betas: Vec<f64>,
    pub sigma_min: Option<f64>,
    pub ambiguous: bool,
    pub reprojections: Vec<ReprojectionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResults {
    pub method: Method,
    pub objects: Vec<ObjectResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub version: String,
    pub config: Value,
    pub results: Vec<MethodResults>,
}

impl ResultsFile {
    pub fn parse(text: &str) -> Result<Self, InputError> {
        let file: Self = serde_json::from_str(text)
            .map_err(|e| InputError(format!("invalid results file: {e}")))?;
        if file.version != RESULTS_VERSION {
            return Err(field_err(
                "version",
                format!("expected '{RESULTS_VERSION}', got '{}'", file.version),
            ));
        }
        Ok(file)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("results serialise");
        s.push('\n');
        s
    }
}

fn conic_array(c: &DualConic) -> [f64; 6] {
    let v = c.vech6();
    std::array::from_fn(|k| v[k])
}

/// Converts one method's batch output into records, reprojecting each
/// estimate into the frames where the object was detected.
pub fn method_results(method: Method, solves: &[ObjectSolve], problem: &Problem) -> MethodResults {
    let tracks: BTreeMap<ObjectId, &ObjectTrack> =
        problem.tracks.iter().map(|t| (t.object_id, t)).collect();
    let objects = solves
        .iter()
        .map(|s| {
            let track = tracks.get(&s.object_id);
            let label = track.and_then(|t| t.label.clone());
            match &s.result {
                Ok(r) => {
                    let reprojections = match (&r.quadric, track) {
                        (Some(q), Some(t)) => t
                            .frame_ids()
                            .into_iter()
                            .map(|f| {
                                let conic = problem.cameras[&f]
                                    .project(q)
                                    .and_then(|c| c.normalized())
                                    .ok();
                                ReprojectionRecord {
                                    frame_id: f,
                                    ellipse: conic
                                        .and_then(|c| c.to_ellipse().ok())
                                        .map(|e| EllipseRecord::from(&e)),
                                    conic: conic.map(|c| conic_array(&c)),
                                }
                            })
                            .collect(),
                        _ => Vec::new(),
                    };
                    ObjectResult {
                        object_id: s.object_id,
                        label,
                        valid: r.is_valid(),
                        reason: r.estimate.reason(),
                        ellipsoid: r.ellipsoid().map(EllipsoidRecord::from_ellipsoid),
                        quadric: r.quadric.map(|q| {
                            let v = q.vech10();
                            std::array::from_fn(|k| v[k])
                        }),
                        betas: r.betas.clone(),
                        sigma_min: Some(r.smallest_singular_value),
                        ambiguous: r.ambiguous,
                        reprojections,
                    }
                }
                Err(e) => ObjectResult {
                    object_id: s.object_id,
                    label,
                    valid: false,
                    reason: Some(e.to_string()),
                    ellipsoid: None,
                    quadric: None,
                    betas: Vec::new(),
                    sigma_min: None,
                    ambiguous: false,
                    reprojections: Vec::new(),
                },
            }
        })
        .collect();
    MethodResults { method, objects }
}

/// True when a batch contains a numerical failure rather than an invalid
/// estimate.
pub fn has_numerical_failure(solves: &[ObjectSolve]) -> bool {
    solves
        .iter()
        .any(|s| matches!(s.result, Err(SolverError::Numerical(_))))
}

/// Keypoint order inside each 21-value block of a pair feature.
pub const FEATURE_LAYOUT: &str =
    "center, center+a*r1, center-a*r1, center+b*r2, center-b*r2, center+c*r3, center-c*r3; subject block then object block";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFeature {
    pub subject: ObjectId,
    pub object: ObjectId,
    pub g: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedObject {
    pub object_id: ObjectId,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturesFile {
    pub version: String,
    pub config: Value,
    /// Where the ellipsoids came from: `ground_truth` or a method name.
    pub source: String,
    pub layout: String,
    pub pairs: Vec<PairFeature>,
    pub skipped: Vec<SkippedObject>,
}

impl FeaturesFile {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("features serialise");
        s.push('\n');
        s
    }
}

/// One feature per ordered pair of distinct available ellipsoids, in
/// (subject, object) id order.
pub fn pair_features(ellipsoids: &BTreeMap<ObjectId, Ellipsoid3D>) -> Vec<PairFeature> {
    let mut out = Vec::new();
    for (&i, ei) in ellipsoids {
        for (&j, ej) in ellipsoids {
            if i != j {
                out.push(PairFeature {
                    subject: i,
                    object: j,
                    g: pair_geometric_feature(ei, ej).to_vec(),
                });
            }
        }
    }
    out
}
