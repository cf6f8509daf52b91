//! Per-object linear systems for dual quadric localisation.
//!
//! Each frame `f` in which an object is observed contributes the linearised
//! projection `beta_f c_f = G_f v`, where `v` is the vech of the dual quadric
//! and `c_f` the vech of the observed dual conic. Stacking the frames gives
//! `M w = 0` with `w = [v; beta]`, solved in the least-squares sense with
//! `||w|| = 1` by taking the right singular vector of the smallest singular
//! value (LfD). LfDC appends two rows per frame asking the ellipsoid center
//! to project onto the ellipse center.
//!
//! Before stacking, each frame is conditioned with the centering transform
//! `H_f = [[h, 0, tx], [0, h, ty], [0, 0, 1]]` built from the observed
//! ellipse (center `(tx, ty)`, `h = sqrt(l1^2 + l2^2)`): the conic becomes
//! `H^-1 C H^-T` and the camera `H^-1 P`. This keeps the rows of every frame
//! on a comparable scale and puts the observed center at the origin.

use crate::geometry::{
    BoundingBox, CameraMatrix, DegenerateQuadric, DualConic, DualQuadric, Ellipse2D, Ellipsoid3D,
    GeometryError, QuadricShape, Vector10,
};
use nalgebra::{DMatrix, DVector, Matrix3, SMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

pub type FrameId = u32;
pub type ObjectId = u32;

/// Minimum number of views per object.
pub const MIN_VIEWS: usize = 3;
/// `|v[10]|` under which a solution cannot be rescaled to `q44 = -1`.
pub const UNNORMALIZABLE_TOL: f64 = 1e-12;
/// Relative size of the second smallest singular value under which the null
/// space is reported as ambiguous.
pub const AMBIGUITY_REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("object {object_id}: needs at least {MIN_VIEWS} views, got {got}")]
    InsufficientViews { object_id: ObjectId, got: usize },
    #[error("object {object_id}: frame {frame_id} observed twice")]
    DuplicateFrame {
        object_id: ObjectId,
        frame_id: FrameId,
    },
    #[error("object {object_id}: no camera for frame {frame_id}")]
    MissingCamera {
        object_id: ObjectId,
        frame_id: FrameId,
    },
    #[error("expected {expected} cameras, got {got}")]
    CameraCount { expected: usize, got: usize },
    #[error("system has {rows} rows for {cols} unknowns")]
    Underdetermined { rows: usize, cols: usize },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, SolverError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lfd,
    Lfdc,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::Lfd, Method::Lfdc];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Lfd => "lfd",
            Method::Lfdc => "lfdc",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lfd" => Ok(Method::Lfd),
            "lfdc" => Ok(Method::Lfdc),
            other => Err(format!("unknown method '{other}' (expected lfd or lfdc)")),
        }
    }
}

/// One observation of an object.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame_id: FrameId,
    /// Normalised dual conic of the observed ellipse.
    pub conic: DualConic,
    pub bbox: Option<BoundingBox>,
}

impl Detection {
    pub fn from_bbox(frame_id: FrameId, bbox: BoundingBox) -> Result<Self> {
        let ellipse = Ellipse2D::from_bbox(&bbox)?;
        Ok(Self {
            frame_id,
            conic: DualConic::from_ellipse(&ellipse),
            bbox: Some(bbox),
        })
    }

    pub fn from_conic(frame_id: FrameId, conic: DualConic) -> Result<Self> {
        let conic = conic.normalized()?;
        let bbox = conic.bounding_box().ok();
        Ok(Self {
            frame_id,
            conic,
            bbox,
        })
    }
}

/// Detections of one object across frames, ordered as given.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrack {
    pub object_id: ObjectId,
    pub label: Option<String>,
    detections: Vec<Detection>,
}

impl ObjectTrack {
    pub fn new(object_id: ObjectId, detections: Vec<Detection>) -> Result<Self> {
        if detections.len() < MIN_VIEWS {
            return Err(SolverError::InsufficientViews {
                object_id,
                got: detections.len(),
            });
        }
        let mut seen = BTreeSet::new();
        for d in &detections {
            if !seen.insert(d.frame_id) {
                return Err(SolverError::DuplicateFrame {
                    object_id,
                    frame_id: d.frame_id,
                });
            }
        }
        Ok(Self {
            object_id,
            label: None,
            detections,
        })
    }

    pub fn from_bboxes(object_id: ObjectId, boxes: &[(FrameId, BoundingBox)]) -> Result<Self> {
        let detections = boxes
            .iter()
            .map(|&(f, b)| Detection::from_bbox(f, b))
            .collect::<Result<Vec<_>>>()?;
        Self::new(object_id, detections)
    }

    pub fn from_conics(object_id: ObjectId, conics: &[(FrameId, DualConic)]) -> Result<Self> {
        let detections = conics
            .iter()
            .map(|&(f, c)| Detection::from_conic(f, c))
            .collect::<Result<Vec<_>>>()?;
        Self::new(object_id, detections)
    }

    pub fn with_label(mut self, label: Option<String>) -> Self {
        self.label = label;
        self
    }

    pub fn detections(&self) -> &[Detection] {
        &self.detections
    }

    pub fn frame_ids(&self) -> Vec<FrameId> {
        self.detections.iter().map(|d| d.frame_id).collect()
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    /// Cameras for each detection, in detection order.
    pub fn cameras(&self, cams: &BTreeMap<FrameId, CameraMatrix>) -> Result<Vec<CameraMatrix>> {
        self.detections
            .iter()
            .map(|d| {
                cams.get(&d.frame_id)
                    .copied()
                    .ok_or(SolverError::MissingCamera {
                        object_id: self.object_id,
                        frame_id: d.frame_id,
                    })
            })
            .collect()
    }
}

/// Linearised dual projection: `vech(P Q P^T) = G vech(Q)`.
///
/// Entry for conic element (r, s) and quadric element (k, l) is
/// `p_rk p_sl + p_rl p_sk` off the diagonal (k != l) and `p_rk p_sk` on it,
/// which is `D (P kron P) E` written out.
pub fn build_g(cam: &CameraMatrix) -> SMatrix<f64, 6, 10> {
    let p = cam.matrix();
    let mut g = SMatrix::<f64, 6, 10>::zeros();
    let mut row = 0;
    for s in 0..3 {
        for r in s..3 {
            let mut col = 0;
            for l in 0..4 {
                for k in l..4 {
                    g[(row, col)] = if k == l {
                        p[(r, k)] * p[(s, k)]
                    } else {
                        p[(r, k)] * p[(s, l)] + p[(r, l)] * p[(s, k)]
                    };
                    col += 1;
                }
            }
            row += 1;
        }
    }
    g
}

/// Center rows: for a normalised quadric with center `t`,
/// `G^c vech(Q) = -(P [t; 1])_{1,2}`.
pub fn build_gc(cam: &CameraMatrix) -> SMatrix<f64, 2, 10> {
    let p = cam.matrix();
    let mut gc = SMatrix::<f64, 2, 10>::zeros();
    for r in 0..2 {
        gc[(r, 3)] = p[(r, 0)];
        gc[(r, 6)] = p[(r, 1)];
        gc[(r, 8)] = p[(r, 2)];
        gc[(r, 9)] = p[(r, 3)];
    }
    gc
}

/// Centering transform of an observed ellipse.
pub fn centering_transform(conic: &DualConic) -> Result<Matrix3<f64>> {
    let e = conic.to_ellipse()?;
    let h = e.scale();
    Ok(Matrix3::new(
        h,
        0.0,
        e.center[0],
        0.0,
        h,
        e.center[1],
        0.0,
        0.0,
        1.0,
    ))
}

/// A frame after conditioning: camera `H^-1 P` and conic `H^-1 C H^-T`.
#[derive(Debug, Clone, Copy)]
pub struct ConditionedFrame {
    pub camera: CameraMatrix,
    pub conic: DualConic,
}

pub fn condition_frame(conic: &DualConic, cam: &CameraMatrix) -> Result<ConditionedFrame> {
    let h = centering_transform(conic)?;
    let h_inv = h
        .try_inverse()
        .ok_or_else(|| SolverError::Numerical("singular centering transform".into()))?;
    let camera = CameraMatrix::new(h_inv * cam.matrix())?;
    let conic = conic.normalized()?.transformed(&h_inv).normalized()?;
    Ok(ConditionedFrame { camera, conic })
}

fn conditioned_frames(track: &ObjectTrack, cams: &[CameraMatrix]) -> Result<Vec<ConditionedFrame>> {
    if track.len() < MIN_VIEWS {
        return Err(SolverError::InsufficientViews {
            object_id: track.object_id,
            got: track.len(),
        });
    }
    if cams.len() != track.len() {
        return Err(SolverError::CameraCount {
            expected: track.len(),
            got: cams.len(),
        });
    }
    track
        .detections()
        .iter()
        .zip(cams)
        .map(|(d, cam)| condition_frame(&d.conic, cam))
        .collect()
}

/// `6F x (10 + F)` LfD system. `cams[f]` is the camera of detection `f`.
pub fn assemble_lfd(track: &ObjectTrack, cams: &[CameraMatrix]) -> Result<DMatrix<f64>> {
    let frames = conditioned_frames(track, cams)?;
    let nf = frames.len();
    let mut m = DMatrix::zeros(6 * nf, 10 + nf);
    for (f, frame) in frames.iter().enumerate() {
        m.view_mut((6 * f, 0), (6, 10))
            .copy_from(&build_g(&frame.camera));
        m.view_mut((6 * f, 10 + f), (6, 1))
            .copy_from(&(-frame.conic.vech6()));
    }
    Ok(m)
}

/// `8F x (10 + F)` LfDC system: per frame the six LfD rows followed by the
/// two center rows `[G^c_f | -c*_f]`, `c*_f` being entries (3, 5) of the
/// conditioned conic.
pub fn assemble_lfdc(track: &ObjectTrack, cams: &[CameraMatrix]) -> Result<DMatrix<f64>> {
    let frames = conditioned_frames(track, cams)?;
    let nf = frames.len();
    let mut m = DMatrix::zeros(8 * nf, 10 + nf);
    for (f, frame) in frames.iter().enumerate() {
        let c = frame.conic.vech6();
        m.view_mut((8 * f, 0), (6, 10))
            .copy_from(&build_g(&frame.camera));
        m.view_mut((8 * f, 10 + f), (6, 1)).copy_from(&(-c));
        m.view_mut((8 * f + 6, 0), (2, 10))
            .copy_from(&build_gc(&frame.camera));
        m[(8 * f + 6, 10 + f)] = -c[2];
        m[(8 * f + 7, 10 + f)] = -c[4];
    }
    Ok(m)
}

pub fn assemble(
    method: Method,
    track: &ObjectTrack,
    cams: &[CameraMatrix],
) -> Result<DMatrix<f64>> {
    match method {
        Method::Lfd => assemble_lfd(track, cams),
        Method::Lfdc => assemble_lfdc(track, cams),
    }
}

/// Minimiser of `||M w||` over unit vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct HomogeneousSolution {
    pub w: DVector<f64>,
    pub smallest_singular_value: f64,
    pub largest_singular_value: f64,
    /// The second smallest singular value is also negligible, so the
    /// minimiser is not unique.
    pub ambiguous: bool,
}

/// Inverse iteration on `R^T R`, keeping a step only while it lowers
/// `||R w||`. Tightens the SVD's vector when its iteration stopped early.
fn polish(r: &DMatrix<f64>, mut w: DVector<f64>) -> DVector<f64> {
    let rt = r.transpose();
    let mut best = (r * &w).norm();
    for _ in 0..3 {
        let Some(x) = rt
            .solve_lower_triangular(&w)
            .and_then(|y| r.solve_upper_triangular(&y))
        else {
            break;
        };
        let n = x.norm();
        if !n.is_finite() || n == 0.0 {
            break;
        }
        let x = x / n;
        let res = (r * &x).norm();
        if res >= best {
            break;
        }
        best = res;
        w = x;
    }
    w
}

/// Right singular vector of the smallest singular value. The sign is fixed
/// so that component 10 (the quadric's `q44`) is non-positive; when that
/// component vanishes the largest-magnitude component is made positive.
pub fn solve_homogeneous(m: &DMatrix<f64>) -> Result<HomogeneousSolution> {
    let (rows, cols) = m.shape();
    if rows < cols || cols == 0 {
        return Err(SolverError::Underdetermined { rows, cols });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::Numerical(
            "system has non-finite entries".into(),
        ));
    }
    // the SVD of the square R factor converges more reliably than the SVD
    // of the tall system and has the same singular values and right vectors
    let r = m.clone().qr().r();
    let svd = r
        .clone()
        .try_svd(false, true, f64::EPSILON, 0)
        .ok_or_else(|| SolverError::Numerical("SVD did not converge".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| SolverError::Numerical("SVD returned no right vectors".into()))?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[a].total_cmp(&sv[b]));
    let smallest = order[0];
    let sigma_max = sv[order[order.len() - 1]];
    let ambiguous = order.len() > 1 && sv[order[1]] <= AMBIGUITY_REL_TOL * sigma_max;

    let w = v_t.row(smallest).transpose();
    let mut w = polish(&r, &w / w.norm());
    let pivot = if w.len() >= 10 && w[9] != 0.0 {
        -w[9]
    } else {
        w.iter()
            .copied()
            .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc })
    };
    if pivot < 0.0 {
        w.neg_mut();
    }
    Ok(HomogeneousSolution {
        w,
        smallest_singular_value: sv[smallest],
        largest_singular_value: sigma_max,
        ambiguous,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimate {
    Ellipsoid(Ellipsoid3D),
    Degenerate(DegenerateQuadric),
    /// `v[10]` vanished, so the quadric cannot be brought to `q44 = -1`.
    Unnormalizable,
}

impl Estimate {
    pub fn ellipsoid(&self) -> Option<&Ellipsoid3D> {
        match self {
            Estimate::Ellipsoid(e) => Some(e),
            _ => None,
        }
    }

    pub fn is_valid(&self) -> bool {
        matches!(self, Estimate::Ellipsoid(_))
    }

    pub fn reason(&self) -> Option<String> {
        match self {
            Estimate::Ellipsoid(_) => None,
            Estimate::Degenerate(d) => Some(format!(
                "shape matrix not positive definite (eigenvalues {:?})",
                d.eigenvalues
            )),
            Estimate::Unnormalizable => Some("quadric has vanishing q44".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub method: Method,
    pub object_id: ObjectId,
    /// Unit solution vector `[v; beta]`, sign-fixed.
    pub w: DVector<f64>,
    /// Normalised quadric (`q44 = -1`), absent when unnormalisable.
    pub quadric: Option<DualQuadric>,
    /// Per-frame scale factors after the same rescaling as the quadric.
    pub betas: Vec<f64>,
    pub estimate: Estimate,
    pub smallest_singular_value: f64,
    pub ambiguous: bool,
}

impl SolveResult {
    pub fn is_valid(&self) -> bool {
        self.estimate.is_valid()
    }

    pub fn ellipsoid(&self) -> Option<&Ellipsoid3D> {
        self.estimate.ellipsoid()
    }

    /// Objects in front of every camera have all scale factors positive.
    pub fn betas_positive(&self) -> bool {
        self.quadric.is_some() && self.betas.iter().all(|&b| b > 0.0)
    }
}

/// Splits `w` into quadric and scale factors and rescales both by
/// `-1 / v[10]`.
pub fn recover(
    method: Method,
    object_id: ObjectId,
    solution: &HomogeneousSolution,
) -> Result<SolveResult> {
    let w = &solution.w;
    if w.len() < 10 {
        return Err(SolverError::Numerical(format!(
            "solution has {} components, expected at least 10",
            w.len()
        )));
    }
    let nf = w.len() - 10;
    let v10 = w[9];
    let (quadric, betas, estimate) = if v10.abs() < UNNORMALIZABLE_TOL {
        (
            None,
            w.rows(10, nf).iter().copied().collect(),
            Estimate::Unnormalizable,
        )
    } else {
        let scale = -1.0 / v10;
        let mut v = Vector10::from_iterator(w.rows(0, 10).iter().map(|x| x * scale));
        v[9] = -1.0;
        let quadric = DualQuadric::from_vech10(&v);
        let betas = w.rows(10, nf).iter().map(|b| b * scale).collect();
        let estimate = match quadric.decompose() {
            Ok(QuadricShape::Ellipsoid(e)) => Estimate::Ellipsoid(e),
            Ok(QuadricShape::Degenerate(d)) => Estimate::Degenerate(d),
            Err(_) => Estimate::Unnormalizable,
        };
        (Some(quadric), betas, estimate)
    };
    Ok(SolveResult {
        method,
        object_id,
        w: w.clone(),
        quadric,
        betas,
        estimate,
        smallest_singular_value: solution.smallest_singular_value,
        ambiguous: solution.ambiguous,
    })
}

/// Assemble, solve and recover for one object.
pub fn solve_track(
    method: Method,
    track: &ObjectTrack,
    cams: &[CameraMatrix],
) -> Result<SolveResult> {
    let m = assemble(method, track, cams)?;
    let sol = solve_homogeneous(&m)?;
    recover(method, track.object_id, &sol)
}

/// Outcome for one object of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSolve {
    pub object_id: ObjectId,
    pub result: Result<SolveResult>,
}

/// Solves every track independently. Failures are reported per object and
/// never abort the batch; output is ordered by object id.
pub fn localize(
    method: Method,
    tracks: &[ObjectTrack],
    cams: &BTreeMap<FrameId, CameraMatrix>,
) -> Vec<ObjectSolve> {
    let mut out: Vec<ObjectSolve> = tracks
        .par_iter()
        .map(|track| ObjectSolve {
            object_id: track.object_id,
            result: track
                .cameras(cams)
                .and_then(|c| solve_track(method, track, &c)),
        })
        .collect();
    out.sort_by_key(|o| o.object_id);
    out
}
