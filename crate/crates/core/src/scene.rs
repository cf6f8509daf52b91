//! Synthetic scenes with known ellipsoids and cameras on an arc, plus the
//! detection noise model.

use crate::geometry::{
    BoundingBox, CameraMatrix, DualConic, Ellipse2D, Ellipsoid3D, GeometryError,
};
use crate::solver::{Detection, FrameId, ObjectId, ObjectTrack, SolverError};
use nalgebra::{Matrix3, UnitQuaternion, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SceneError {
    #[error("invalid scene configuration: {0}")]
    InvalidConfig(String),
    #[error("degenerate configuration: {0}")]
    DegenerateConfig(String),
    #[error("could not place object {object} visibly after {attempts} attempts")]
    Unplaceable { object: usize, attempts: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub objects: usize,
    pub frames: usize,
    /// Half extents (meters) of the box object centers are drawn from.
    pub room_half_extent: [f64; 3],
    /// Range of semi-axis lengths (meters).
    pub axis_range: [f64; 2],
    /// Distance from the scene center to the camera arc.
    pub arc_radius: f64,
    /// Height of the arc above the scene center.
    pub camera_height: f64,
    /// Angle spanned by the camera arc around the scene center.
    pub span_deg: f64,
    pub image_size: [f64; 2],
    pub focal_length: f64,
    /// Margin (pixels) every projected outline keeps from the image border.
    pub image_margin: f64,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            objects: 5,
            frames: 6,
            room_half_extent: [1.0, 0.4, 1.0],
            axis_range: [0.1, 0.45],
            arc_radius: 4.0,
            camera_height: 1.0,
            span_deg: 20.0,
            image_size: [640.0, 480.0],
            focal_length: 525.0,
            image_margin: 2.0,
            max_attempts: 200,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |msg: &str| Err(SceneError::InvalidConfig(msg.to_string()));
        if self.frames == 0 {
            return bad("frames must be positive");
        }
        if !(self.axis_range[0] > 0.0 && self.axis_range[1] >= self.axis_range[0]) {
            return bad("axis_range must satisfy 0 < min <= max");
        }
        if self.room_half_extent.iter().any(|&h| !(h >= 0.0)) {
            return bad("room_half_extent must be non-negative");
        }
        if !(self.arc_radius > 0.0) || !(self.focal_length > 0.0) {
            return bad("arc_radius and focal_length must be positive");
        }
        if self.image_size.iter().any(|&s| !(s > 0.0)) {
            return bad("image_size must be positive");
        }
        if !(self.span_deg >= 0.0 && self.span_deg < 360.0) {
            return bad("span_deg must lie in [0, 360)");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive");
        }
        if self.frames > 1 && self.span_deg == 0.0 {
            return Err(SceneError::DegenerateConfig(format!(
                "span of 0 degrees puts all {} cameras at the same position",
                self.frames
            )));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.focal_length,
            0.0,
            0.5 * self.image_size[0],
            0.0,
            self.focal_length,
            0.5 * self.image_size[1],
            0.0,
            0.0,
            1.0,
        )
    }
}

/// Ground truth object of a synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub object_id: ObjectId,
    pub ellipsoid: Ellipsoid3D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub config: SceneConfig,
    pub objects: Vec<SceneObject>,
    pub cameras: BTreeMap<FrameId, CameraMatrix>,
    /// One track per object; detections carry the observed conic and its box.
    pub tracks: Vec<ObjectTrack>,
    /// Noise applied to the box corners so far (0 for exact scenes).
    pub noise_px: f64,
}

impl SyntheticScene {
    pub fn span_deg(&self) -> f64 {
        self.config.span_deg
    }

    pub fn ground_truth(&self, object_id: ObjectId) -> Option<&Ellipsoid3D> {
        self.objects
            .iter()
            .find(|o| o.object_id == object_id)
            .map(|o| &o.ellipsoid)
    }

    /// Same detections, observed as the axis-aligned ellipse inscribed in
    /// each box rather than the exact outline.
    pub fn with_inscribed_ellipses(&self) -> Result<Self, SceneError> {
        let mut out = self.clone();
        for track in &mut out.tracks {
            let detections = track
                .detections()
                .iter()
                .map(|d| {
                    let bbox = match d.bbox {
                        Some(b) => b,
                        None => d.conic.bounding_box()?,
                    };
                    Ok(Detection::from_bbox(d.frame_id, bbox)?)
                })
                .collect::<Result<Vec<_>, SceneError>>()?;
            *track = ObjectTrack::new(track.object_id, detections)?.with_label(track.label.clone());
        }
        Ok(out)
    }
}

/// SplitMix64 finaliser, used to derive independent stream seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// World-to-camera rotation for a camera at `eye` looking at `target`, image
/// y axis pointing towards world -y.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> Result<Matrix3<f64>, SceneError> {
    let forward = target - eye;
    if forward.norm() < 1e-12 {
        return Err(SceneError::DegenerateConfig(
            "camera coincides with its target".into(),
        ));
    }
    let z = forward.normalize();
    let down = Vector3::new(0.0, -1.0, 0.0);
    let y = down - z * z.dot(&down);
    if y.norm() < 1e-9 {
        return Err(SceneError::DegenerateConfig(
            "camera looks straight up or down".into(),
        ));
    }
    let y = y.normalize();
    let x = y.cross(&z);
    Ok(Matrix3::from_rows(&[
        x.transpose(),
        y.transpose(),
        z.transpose(),
    ]))
}

/// Cameras on a horizontal arc of the given span around the origin, all
/// looking at the origin. `azimuth` is the direction of the arc midpoint.
pub fn arc_cameras(config: &SceneConfig, azimuth: f64) -> Result<Vec<CameraMatrix>, SceneError> {
    let k = config.intrinsics();
    let span = config.span_deg.to_radians();
    let n = config.frames;
    (0..n)
        .map(|i| {
            let frac = if n > 1 {
                i as f64 / (n - 1) as f64 - 0.5
            } else {
                0.0
            };
            let phi = azimuth + span * frac;
            let eye = Vector3::new(
                config.arc_radius * phi.sin(),
                config.camera_height,
                config.arc_radius * phi.cos(),
            );
            let r = look_at(&eye, &Vector3::zeros())?;
            Ok(CameraMatrix::from_pose(&k, &r, &eye)?)
        })
        .collect()
}

/// Whether the ellipsoid lies entirely in front of the camera (at least
/// `near` along the optical axis) and its outline inside the image.
fn observe(e: &Ellipsoid3D, cam: &CameraMatrix, config: &SceneConfig) -> Option<DualConic> {
    let p = cam.matrix();
    let axis = Vector3::new(p[(2, 0)], p[(2, 1)], p[(2, 2)]);
    let norm = axis.norm();
    let plane = Vector4::new(axis.x, axis.y, axis.z, p[(2, 3)]) / norm;
    let depth = plane.xyz().dot(&e.center) + plane.w;
    let reach = (plane.xyz().transpose() * e.shape_matrix() * plane.xyz())[(0, 0)].sqrt();
    if depth - reach < 0.2 {
        return None;
    }
    let conic = cam.project(&e.dual_quadric()).ok()?;
    let bbox = conic.bounding_box().ok()?;
    let m = config.image_margin;
    let [w, h] = config.image_size;
    if bbox.x_min < m || bbox.y_min < m || bbox.x_max > w - m || bbox.y_max > h - m {
        return None;
    }
    Some(conic)
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let q = Vector4::from_fn(|_, _| normal.sample(rng));
    let q = if q.norm() < 1e-12 {
        Vector4::new(0.0, 0.0, 0.0, 1.0)
    } else {
        q
    };
    let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q.w, q.x, q.y, q.z));
    *uq.to_rotation_matrix().matrix()
}

/// Deterministic in `(config, seed)`.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<SyntheticScene, SceneError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let azimuth = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let cams = arc_cameras(config, azimuth)?;

    let mut objects = Vec::with_capacity(config.objects);
    let mut tracks = Vec::with_capacity(config.objects);
    for idx in 0..config.objects {
        let mut placed = None;
        for _ in 0..config.max_attempts {
            let center = Vector3::from_fn(|i, _| {
                let h = config.room_half_extent[i];
                if h > 0.0 {
                    rng.random_range(-h..=h)
                } else {
                    0.0
                }
            });
            let [lo, hi] = config.axis_range;
            let axes = [0; 3].map(|_| {
                if hi > lo {
                    rng.random_range(lo..=hi)
                } else {
                    lo
                }
            });
            let rotation = random_rotation(&mut rng);
            let e = Ellipsoid3D::new(center, axes, rotation)?;
            let conics: Option<Vec<_>> = cams.iter().map(|c| observe(&e, c, config)).collect();
            if let Some(conics) = conics {
                placed = Some((e, conics));
                break;
            }
        }
        let (e, conics) = placed.ok_or(SceneError::Unplaceable {
            object: idx,
            attempts: config.max_attempts,
        })?;
        let object_id = idx as ObjectId;
        let detections = conics
            .into_iter()
            .enumerate()
            .map(|(f, c)| Detection::from_conic(f as FrameId, c))
            .collect::<Result<Vec<_>, _>>()?;
        let track = if detections.len() >= crate::solver::MIN_VIEWS {
            ObjectTrack::new(object_id, detections)?
        } else {
            return Err(SceneError::InvalidConfig(format!(
                "{} frames cannot support a track (need {})",
                config.frames,
                crate::solver::MIN_VIEWS
            )));
        };
        objects.push(SceneObject {
            object_id,
            ellipsoid: e,
        });
        tracks.push(track);
    }
    Ok(SyntheticScene {
        seed,
        config: config.clone(),
        objects,
        cameras: cams
            .into_iter()
            .enumerate()
            .map(|(f, c)| (f as FrameId, c))
            .collect(),
        tracks,
        noise_px: 0.0,
    })
}

/// Adds i.i.d. Gaussian noise of standard deviation `sigma_px` to every box
/// corner and clamps the result to the image. The observed ellipse follows
/// its box: the exact outline is mapped by the axis-aligned affine map that
/// takes the old box onto the new one, so it stays inscribed in the noisy
/// box. `sigma_px = 0` leaves the scene untouched.
pub fn perturb_bboxes(
    scene: &SyntheticScene,
    sigma_px: f64,
    seed: u64,
) -> Result<SyntheticScene, SceneError> {
    if !(sigma_px >= 0.0) || !sigma_px.is_finite() {
        return Err(SceneError::InvalidConfig(format!(
            "noise must be a non-negative number, got {sigma_px}"
        )));
    }
    if sigma_px == 0.0 {
        return Ok(scene.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma_px).expect("valid sigma");
    let [w, h] = scene.config.image_size;
    let mut out = scene.clone();
    for track in &mut out.tracks {
        let mut detections = Vec::with_capacity(track.len());
        for d in track.detections() {
            let old = match d.bbox {
                Some(b) => b,
                None => d.conic.bounding_box()?,
            };
            let mut noisy = [old.x_min, old.y_min, old.x_max, old.y_max];
            for v in &mut noisy {
                *v += normal.sample(&mut rng);
            }
            let clamp = |v: f64, hi: f64| v.clamp(0.0, hi);
            let mut x0 = clamp(noisy[0], w);
            let mut y0 = clamp(noisy[1], h);
            let mut x1 = clamp(noisy[2], w);
            let mut y1 = clamp(noisy[3], h);
            // keep at least one pixel of extent
            if x1 - x0 < 1.0 {
                let c = 0.5 * (x0 + x1);
                x0 = (c - 0.5).max(0.0);
                x1 = x0 + 1.0;
            }
            if y1 - y0 < 1.0 {
                let c = 0.5 * (y0 + y1);
                y0 = (c - 0.5).max(0.0);
                y1 = y0 + 1.0;
            }
            let new = BoundingBox::new(x0, y0, x1, y1)?;
            let sx = new.width() / old.width();
            let sy = new.height() / old.height();
            let affine = Matrix3::new(
                sx,
                0.0,
                new.x_min - sx * old.x_min,
                0.0,
                sy,
                new.y_min - sy * old.y_min,
                0.0,
                0.0,
                1.0,
            );
            detections.push(Detection {
                frame_id: d.frame_id,
                conic: d.conic.transformed(&affine).normalized()?,
                bbox: Some(new),
            });
        }
        *track = ObjectTrack::new(track.object_id, detections)?.with_label(track.label.clone());
    }
    out.noise_px = (scene.noise_px.powi(2) + sigma_px.powi(2)).sqrt();
    Ok(out)
}

/// Parametric form of every observation, useful for debugging fixtures.
pub fn observed_ellipses(track: &ObjectTrack) -> Vec<(FrameId, Option<Ellipse2D>)> {
    track
        .detections()
        .iter()
        .map(|d| (d.frame_id, d.conic.to_ellipse().ok()))
        .collect()
}
