//! Projective kernels for dual conics and dual quadrics.
//!
//! Symmetric matrices are serialised with `vech`, which walks the lower
//! triangle column by column. For a 3x3 dual conic that gives
//! `[c11, c12, c13, c22, c23, c33]` and for a 4x4 dual quadric
//! `[q11, q12, q13, q14, q22, q23, q24, q33, q34, q44]`, so the translation
//! terms of a normalised conic sit at (1-based) positions 3 and 5 and those
//! of a normalised quadric at positions 4, 7 and 9. This is the only order
//! supported anywhere in the crate.
//!
//! Normalised conics and quadrics have their last diagonal element equal to
//! -1. Every constructor accepts raw (unnormalised) matrices.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x4, Matrix4, SVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

pub type Vector6 = SVector<f64, 6>;
pub type Vector10 = SVector<f64, 10>;

/// Tolerance used for the symmetry checks on input matrices.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Relative magnitude under which a last diagonal element counts as zero.
pub const NORMALIZATION_TOL: f64 = 1e-12;
/// Relative positivity threshold for the shape eigenvalues of a quadric.
pub const POSITIVITY_REL_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("vector of length {len} is not a vech of a {n}x{n} matrix")]
    BadVechLength { len: usize, n: usize },
    #[error("projected conic has a vanishing last element")]
    DegenerateProjection,
    #[error("cannot normalise: last diagonal element is zero")]
    NotNormalizable,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid ellipsoid: {0}")]
    InvalidEllipsoid(String),
    #[error("conic is not an ellipse")]
    NotAnEllipse,
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Axis-aligned detection box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let bbox = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        bbox.validate()?;
        Ok(bbox)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.x_min, self.y_min, self.x_max, self.y_max];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::DegenerateInput(
                "bounding box has non-finite corners".into(),
            ));
        }
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(GeometryError::DegenerateInput(format!(
                "bounding box [{}, {}, {}, {}] has zero or negative extent",
                self.x_min, self.y_min, self.x_max, self.y_max
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        ]
    }
}

/// Parametric ellipse: center, semi-axes and the angle of the first semi-axis
/// measured from the image x axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse2D {
    pub center: [f64; 2],
    pub semi_axes: [f64; 2],
    /// Radians in [-pi/2, pi/2).
    pub orientation: f64,
}

impl Ellipse2D {
    pub fn new(center: [f64; 2], semi_axes: [f64; 2], orientation: f64) -> Result<Self> {
        if !(semi_axes[0] > 0.0 && semi_axes[1] > 0.0) {
            return Err(GeometryError::DegenerateInput(format!(
                "ellipse semi-axes must be positive, got {:?}",
                semi_axes
            )));
        }
        if center
            .iter()
            .chain(semi_axes.iter())
            .any(|v| !v.is_finite())
            || !orientation.is_finite()
        {
            return Err(GeometryError::DegenerateInput(
                "ellipse has non-finite parameters".into(),
            ));
        }
        Ok(Self {
            center,
            semi_axes,
            orientation: wrap_half_turn(orientation),
        })
    }

    /// The ellipse inscribed in a detection box (axis aligned).
    pub fn from_bbox(bbox: &BoundingBox) -> Result<Self> {
        bbox.validate()?;
        Self::new(
            bbox.center(),
            [0.5 * bbox.width(), 0.5 * bbox.height()],
            0.0,
        )
    }

    /// `sqrt(l1^2 + l2^2)`, the scale of the conic centering transform.
    pub fn scale(&self) -> f64 {
        self.semi_axes[0].hypot(self.semi_axes[1])
    }

    /// Tight axis-aligned box around the ellipse.
    pub fn bounding_box(&self) -> BoundingBox {
        let (s, c) = self.orientation.sin_cos();
        let [l1, l2] = self.semi_axes;
        let hw = ((l1 * c).powi(2) + (l2 * s).powi(2)).sqrt();
        let hh = ((l1 * s).powi(2) + (l2 * c).powi(2)).sqrt();
        BoundingBox {
            x_min: self.center[0] - hw,
            y_min: self.center[1] - hh,
            x_max: self.center[0] + hw,
            y_max: self.center[1] + hh,
        }
    }
}

/// Maps an angle onto [-pi/2, pi/2). Ellipse axes are lines, so a half turn
/// is the identity.
pub fn wrap_half_turn(angle: f64) -> f64 {
    let wrapped = (angle + 0.5 * PI).rem_euclid(PI) - 0.5 * PI;
    if wrapped >= 0.5 * PI {
        wrapped - PI
    } else {
        wrapped
    }
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    let scale = m.amax().max(1.0);
    let asym = max_asymmetry(m);
    if asym > SYMMETRY_TOL * scale {
        return Err(GeometryError::NotSymmetric(asym));
    }
    Ok(())
}

/// Number of free entries of an n x n symmetric matrix.
pub const fn vech_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// 0-based position of entry (row, col), row >= col, inside `vech`.
pub fn vech_index(n: usize, row: usize, col: usize) -> usize {
    let (row, col) = if row >= col { (row, col) } else { (col, row) };
    // columns before `col` contribute n, n-1, ..., n-col+1 entries
    col * n - col * col.saturating_sub(1) / 2 + (row - col)
}

/// Serialises the lower triangle of a symmetric matrix column by column.
pub fn vech(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    if m.nrows() != m.ncols() {
        return Err(GeometryError::DegenerateInput(format!(
            "vech needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    check_symmetric(m)?;
    let n = m.nrows();
    let mut out = Vec::with_capacity(vech_len(n));
    for col in 0..n {
        for row in col..n {
            out.push(m[(row, col)]);
        }
    }
    Ok(DVector::from_vec(out))
}

/// Inverse of [`vech`].
pub fn unvech(v: &[f64], n: usize) -> Result<DMatrix<f64>> {
    if v.len() != vech_len(n) {
        return Err(GeometryError::BadVechLength { len: v.len(), n });
    }
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for col in 0..n {
        for row in col..n {
            m[(row, col)] = v[k];
            m[(col, row)] = v[k];
            k += 1;
        }
    }
    Ok(m)
}

/// Dual (tangent-line) representation of an image conic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualConic {
    m: Matrix3<f64>,
}

impl DualConic {
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::DegenerateInput("non-finite conic".into()));
        }
        check_symmetric(&DMatrix::from_iterator(3, 3, m.iter().copied()))?;
        Ok(Self {
            m: 0.5 * (m + m.transpose()),
        })
    }

    pub fn from_vech6(v: &Vector6) -> Self {
        let m = unvech(v.as_slice(), 3).expect("length 6");
        Self {
            m: Matrix3::from_iterator(m.iter().copied()),
        }
    }

    /// Dual conic of a parametric ellipse, normalised so that element (3,3)
    /// is -1: `T R diag(l1^2, l2^2, -1) R^T T^T` with `T` the translation to
    /// the ellipse center.
    pub fn from_ellipse(e: &Ellipse2D) -> Self {
        let (s, c) = e.orientation.sin_cos();
        let rot = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        let [l1, l2] = e.semi_axes;
        let centered =
            rot * Matrix3::from_diagonal(&Vector3::new(l1 * l1, l2 * l2, -1.0)) * rot.transpose();
        let t = Matrix3::new(1.0, 0.0, e.center[0], 0.0, 1.0, e.center[1], 0.0, 0.0, 1.0);
        let m = t * centered * t.transpose();
        Self {
            m: 0.5 * (m + m.transpose()),
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn is_normalized(&self) -> bool {
        self.m[(2, 2)] == -1.0
    }

    /// Rescales so that element (3,3) equals -1.
    pub fn normalized(&self) -> Result<Self> {
        let last = self.m[(2, 2)];
        if last.abs() <= NORMALIZATION_TOL * self.m.amax() || last == 0.0 {
            return Err(GeometryError::NotNormalizable);
        }
        let mut m = self.m / -last;
        m[(2, 2)] = -1.0;
        Ok(Self { m })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { m: self.m * factor }
    }

    pub fn vech6(&self) -> Vector6 {
        let m = &self.m;
        Vector6::new(
            m[(0, 0)],
            m[(1, 0)],
            m[(2, 0)],
            m[(1, 1)],
            m[(2, 1)],
            m[(2, 2)],
        )
    }

    /// Ellipse center, i.e. the pole of the line at infinity.
    pub fn center(&self) -> Result<[f64; 2]> {
        let n = self.normalized()?;
        Ok([-n.m[(0, 2)], -n.m[(1, 2)]])
    }

    /// Recovers the parametric ellipse, first semi-axis being the major one.
    pub fn to_ellipse(&self) -> Result<Ellipse2D> {
        let n = self.normalized()?;
        let t = Vector3::new(-n.m[(0, 2)], -n.m[(1, 2)], 0.0);
        let s = n.m.fixed_view::<2, 2>(0, 0) + t.xy() * t.xy().transpose();
        let eig = s.symmetric_eigen();
        let (major, minor) = if eig.eigenvalues[0] >= eig.eigenvalues[1] {
            (0, 1)
        } else {
            (1, 0)
        };
        let (lmaj, lmin) = (eig.eigenvalues[major], eig.eigenvalues[minor]);
        if !(lmin > 0.0) || !lmaj.is_finite() {
            return Err(GeometryError::NotAnEllipse);
        }
        let dir = eig.eigenvectors.column(major);
        Ellipse2D::new([t.x, t.y], [lmaj.sqrt(), lmin.sqrt()], dir[1].atan2(dir[0]))
    }

    /// Tight axis-aligned box of the ellipse, from the tangent lines
    /// `x = const` and `y = const`.
    pub fn bounding_box(&self) -> Result<BoundingBox> {
        let n = self.normalized()?;
        let (tx, ty) = (-n.m[(0, 2)], -n.m[(1, 2)]);
        let hw2 = n.m[(0, 0)] + tx * tx;
        let hh2 = n.m[(1, 1)] + ty * ty;
        if !(hw2 > 0.0 && hh2 > 0.0) {
            return Err(GeometryError::NotAnEllipse);
        }
        let (hw, hh) = (hw2.sqrt(), hh2.sqrt());
        BoundingBox::new(tx - hw, ty - hh, tx + hw, ty + hh)
    }

    /// Applies the image transform `x -> A x`, i.e. `C -> A C A^T`.
    pub fn transformed(&self, a: &Matrix3<f64>) -> Self {
        let m = a * self.m * a.transpose();
        Self {
            m: 0.5 * (m + m.transpose()),
        }
    }
}

/// Dual representation of a quadric surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualQuadric {
    m: Matrix4<f64>,
}

impl DualQuadric {
    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::DegenerateInput("non-finite quadric".into()));
        }
        check_symmetric(&DMatrix::from_iterator(4, 4, m.iter().copied()))?;
        Ok(Self {
            m: 0.5 * (m + m.transpose()),
        })
    }

    pub fn from_vech10(v: &Vector10) -> Self {
        let m = unvech(v.as_slice(), 4).expect("length 10");
        Self {
            m: Matrix4::from_iterator(m.iter().copied()),
        }
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.m
    }

    pub fn vech10(&self) -> Vector10 {
        let mut v = Vector10::zeros();
        let mut k = 0;
        for col in 0..4 {
            for row in col..4 {
                v[k] = self.m[(row, col)];
                k += 1;
            }
        }
        v
    }

    /// Rescales so that element (4,4) equals -1.
    pub fn normalized(&self) -> Result<Self> {
        let last = self.m[(3, 3)];
        if last == 0.0 || last.abs() < NORMALIZATION_TOL * self.m.amax() {
            return Err(GeometryError::NotNormalizable);
        }
        let mut m = self.m / -last;
        m[(3, 3)] = -1.0;
        Ok(Self { m })
    }

    /// Applies a point transform `X -> T X` to the surface, i.e.
    /// `Q -> T Q T^T`.
    pub fn transformed(&self, t: &Matrix4<f64>) -> Self {
        let m = t * self.m * t.transpose();
        Self {
            m: 0.5 * (m + m.transpose()),
        }
    }

    /// Splits the quadric into center, semi-axes and rotation. Shapes whose
    /// centered 3x3 block is not positive definite come back as
    /// [`QuadricShape::Degenerate`].
    pub fn decompose(&self) -> Result<QuadricShape> {
        let q = self.normalized()?.m;
        let t = -q.fixed_view::<3, 1>(0, 3).into_owned();
        let s = q.fixed_view::<3, 3>(0, 0) + t * t.transpose();
        let s = 0.5 * (s + s.transpose());
        let eig = s.symmetric_eigen();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let values = Vector3::from_fn(|i, _| eig.eigenvalues[order[i]]);
        let eps = POSITIVITY_REL_EPS * s.trace();
        if !(eps > 0.0) || values.iter().any(|&v| !(v > eps)) {
            return Ok(QuadricShape::Degenerate(DegenerateQuadric {
                center: t,
                eigenvalues: [values[0], values[1], values[2]],
            }));
        }
        let mut rotation = Matrix3::from_fn(|r, c| eig.eigenvectors[(r, order[c])]);
        if rotation.determinant() < 0.0 {
            rotation.column_mut(2).neg_mut();
        }
        Ok(QuadricShape::Ellipsoid(Ellipsoid3D {
            center: t,
            semi_axes: [values[0].sqrt(), values[1].sqrt(), values[2].sqrt()],
            rotation,
        }))
    }
}

/// A quadric whose shape block has a non-positive eigenvalue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegenerateQuadric {
    pub center: Vector3<f64>,
    /// Shape eigenvalues sorted in decreasing order.
    pub eigenvalues: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuadricShape {
    Ellipsoid(Ellipsoid3D),
    Degenerate(DegenerateQuadric),
}

impl QuadricShape {
    pub fn ellipsoid(&self) -> Option<&Ellipsoid3D> {
        match self {
            QuadricShape::Ellipsoid(e) => Some(e),
            QuadricShape::Degenerate(_) => None,
        }
    }

    pub fn is_valid(&self) -> bool {
        matches!(self, QuadricShape::Ellipsoid(_))
    }
}

/// Ellipsoid in canonical form: semi-axes sorted a >= b >= c > 0, columns of
/// `rotation` are the matching axis directions and `det(rotation) = +1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid3D {
    pub center: Vector3<f64>,
    pub semi_axes: [f64; 3],
    pub rotation: Matrix3<f64>,
}

impl Ellipsoid3D {
    /// Builds a canonical ellipsoid; axes are sorted and the rotation columns
    /// permuted to match.
    pub fn new(center: Vector3<f64>, semi_axes: [f64; 3], rotation: Matrix3<f64>) -> Result<Self> {
        if center.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidEllipsoid("non-finite center".into()));
        }
        if semi_axes.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
            return Err(GeometryError::InvalidEllipsoid(format!(
                "semi-axes must be positive, got {:?}",
                semi_axes
            )));
        }
        let orth = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if !(orth <= 1e-9) {
            return Err(GeometryError::InvalidEllipsoid(format!(
                "rotation is not orthonormal (error {orth:e})"
            )));
        }
        if rotation.determinant() < 0.0 {
            return Err(GeometryError::InvalidEllipsoid(
                "rotation has determinant -1".into(),
            ));
        }
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| semi_axes[b].total_cmp(&semi_axes[a]));
        let mut r = Matrix3::from_fn(|row, col| rotation[(row, order[col])]);
        if r.determinant() < 0.0 {
            r.column_mut(2).neg_mut();
        }
        Ok(Self {
            center,
            semi_axes: [
                semi_axes[order[0]],
                semi_axes[order[1]],
                semi_axes[order[2]],
            ],
            rotation: r,
        })
    }

    pub fn sphere(center: Vector3<f64>, radius: f64) -> Result<Self> {
        Self::new(center, [radius; 3], Matrix3::identity())
    }

    /// `Z diag(a^2, b^2, c^2, -1) Z^T` with `Z = [R t; 0 1]`.
    pub fn dual_quadric(&self) -> DualQuadric {
        let mut z = Matrix4::identity();
        z.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        z.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.center);
        let [a, b, c] = self.semi_axes;
        let d = Matrix4::from_diagonal(&Vector4::new(a * a, b * b, c * c, -1.0));
        let m = z * d * z.transpose();
        let mut m = 0.5 * (m + m.transpose());
        m[(3, 3)] = -1.0;
        DualQuadric { m }
    }

    /// `R diag(a^2, b^2, c^2) R^T`.
    pub fn shape_matrix(&self) -> Matrix3<f64> {
        let [a, b, c] = self.semi_axes;
        self.rotation
            * Matrix3::from_diagonal(&Vector3::new(a * a, b * b, c * c))
            * self.rotation.transpose()
    }

    /// Half extents of the axis-aligned bounding box.
    pub fn aabb_half_extents(&self) -> Vector3<f64> {
        let s = self.shape_matrix();
        Vector3::new(s[(0, 0)].sqrt(), s[(1, 1)].sqrt(), s[(2, 2)].sqrt())
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let local = self.rotation.transpose() * (p - self.center);
        let [a, b, c] = self.semi_axes;
        (local.x / a).powi(2) + (local.y / b).powi(2) + (local.z / c).powi(2) <= 1.0
    }

    pub fn volume(&self) -> f64 {
        let [a, b, c] = self.semi_axes;
        4.0 / 3.0 * PI * a * b * c
    }
}

/// Finite projective camera `P` (3x4, rank 3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraMatrix {
    p: Matrix3x4<f64>,
}

impl CameraMatrix {
    pub fn new(p: Matrix3x4<f64>) -> Result<Self> {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidCamera("non-finite entries".into()));
        }
        let sv = p.singular_values();
        let max = sv.max();
        if !(max > 0.0) || sv.min() <= 1e-12 * max {
            return Err(GeometryError::InvalidCamera("rank below 3".into()));
        }
        Ok(Self { p })
    }

    pub fn from_row_major(values: &[f64]) -> Result<Self> {
        if values.len() != 12 {
            return Err(GeometryError::InvalidCamera(format!(
                "expected 12 values, got {}",
                values.len()
            )));
        }
        Self::new(Matrix3x4::from_row_slice(values))
    }

    /// `K [R | -R c]` for a camera at `center` whose world-to-camera rotation
    /// is `rotation`.
    pub fn from_pose(
        intrinsics: &Matrix3<f64>,
        rotation: &Matrix3<f64>,
        center: &Vector3<f64>,
    ) -> Result<Self> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(rotation);
        rt.fixed_view_mut::<3, 1>(0, 3)
            .copy_from(&(-rotation * center));
        Self::new(intrinsics * rt)
    }

    pub fn matrix(&self) -> &Matrix3x4<f64> {
        &self.p
    }

    pub fn row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..4 {
                out[4 * r + c] = self.p[(r, c)];
            }
        }
        out
    }

    /// Camera center from the null space of `P`.
    pub fn center(&self) -> Result<Vector3<f64>> {
        let minor = |skip: usize| {
            let cols: Vec<usize> = (0..4).filter(|&c| c != skip).collect();
            Matrix3::from_fn(|r, c| self.p[(r, cols[c])]).determinant()
        };
        let x = minor(0);
        let y = -minor(1);
        let z = minor(2);
        let w = -minor(3);
        if w.abs() <= 1e-12 * x.abs().max(y.abs()).max(z.abs()) || w == 0.0 {
            return Err(GeometryError::InvalidCamera(
                "camera center lies at infinity".into(),
            ));
        }
        Ok(Vector3::new(x / w, y / w, z / w))
    }

    pub fn project_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.p * x.push(1.0)
    }

    /// Projects a dual quadric to its (normalised) dual conic outline,
    /// `P Q P^T`.
    pub fn project(&self, q: &DualQuadric) -> Result<DualConic> {
        project_dual_quadric(q, self)
    }
}

/// `P Q P^T`, returned normalised.
pub fn project_dual_quadric(q: &DualQuadric, cam: &CameraMatrix) -> Result<DualConic> {
    let raw = cam.p * q.m * cam.p.transpose();
    let raw = 0.5 * (raw + raw.transpose());
    let last = raw[(2, 2)];
    if last == 0.0 || last.abs() <= NORMALIZATION_TOL * raw.amax() {
        return Err(GeometryError::DegenerateProjection);
    }
    DualConic { m: raw }.normalized()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Rotation3;

    #[test]
    fn ellipse_from_box_examples() {
        let e = Ellipse2D::from_bbox(&BoundingBox::new(10.0, 20.0, 50.0, 60.0).unwrap()).unwrap();
        assert_eq!(e.center, [30.0, 40.0]);
        assert_eq!(e.semi_axes, [20.0, 20.0]);
        assert_eq!(e.orientation, 0.0);

        let e = Ellipse2D::from_bbox(&BoundingBox::new(0.0, 0.0, 2.0, 2.0).unwrap()).unwrap();
        assert_eq!((e.center, e.semi_axes), ([1.0, 1.0], [1.0, 1.0]));

        let e = Ellipse2D::from_bbox(&BoundingBox::new(0.0, 0.0, 6.0, 8.0).unwrap()).unwrap();
        assert_eq!((e.center, e.semi_axes), ([3.0, 4.0], [3.0, 4.0]));
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(matches!(
            BoundingBox::new(1.0, 1.0, 1.0, 5.0),
            Err(GeometryError::DegenerateInput(_))
        ));
        let flat = BoundingBox {
            x_min: 0.0,
            y_min: 3.0,
            x_max: 4.0,
            y_max: 3.0,
        };
        assert!(Ellipse2D::from_bbox(&flat).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn dual_conic_of_axis_aligned_ellipse() {
        let c = DualConic::from_ellipse(&Ellipse2D::new([0.0, 0.0], [3.0, 3.0], 0.0).unwrap());
        assert_eq!(c.vech6().as_slice(), &[9.0, 0.0, 0.0, 9.0, 0.0, -1.0]);

        let c = DualConic::from_ellipse(&Ellipse2D::new([2.0, 1.0], [3.0, 4.0], 0.0).unwrap());
        let v = c.vech6();
        let expected = [5.0, -2.0, -2.0, 15.0, -1.0, -1.0];
        for (a, b) in v.iter().zip(expected) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn conic_center_terms_are_negated_center() {
        let e = Ellipse2D::new([123.5, -7.25], [40.0, 12.0], 0.7).unwrap();
        let v = DualConic::from_ellipse(&e).vech6();
        assert_eq!(v[2], -123.5);
        assert_eq!(v[4], 7.25);
        assert_eq!(v[5], -1.0);
    }

    #[test]
    fn conic_to_ellipse_round_trip() {
        let e = Ellipse2D::new([320.0, 200.0], [80.0, 25.0], -0.4).unwrap();
        let back = DualConic::from_ellipse(&e).to_ellipse().unwrap();
        assert_relative_eq!(back.center[0], 320.0, epsilon = 1e-9);
        assert_relative_eq!(back.center[1], 200.0, epsilon = 1e-9);
        assert_relative_eq!(back.semi_axes[0], 80.0, epsilon = 1e-9);
        assert_relative_eq!(back.semi_axes[1], 25.0, epsilon = 1e-9);
        assert_relative_eq!(back.orientation, -0.4, epsilon = 1e-9);
    }

    #[test]
    fn conic_bounding_box_matches_parametric_box() {
        let e = Ellipse2D::new([50.0, 60.0], [30.0, 10.0], 0.3).unwrap();
        let a = e.bounding_box();
        let b = DualConic::from_ellipse(&e).bounding_box().unwrap();
        assert_relative_eq!(a.x_min, b.x_min, epsilon = 1e-9);
        assert_relative_eq!(a.y_max, b.y_max, epsilon = 1e-9);
    }

    #[test]
    fn vech_identity_and_positions() {
        let v = vech(&DMatrix::identity(4, 4)).unwrap();
        assert_eq!(
            v.as_slice(),
            &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]
        );

        let q = DMatrix::from_fn(4, 4, |r, c| (r.min(c) * 10 + r.max(c)) as f64);
        let v = vech(&q).unwrap();
        // 1-based positions 4, 7, 9 hold (1,4), (2,4), (3,4)
        assert_eq!(v[3], q[(0, 3)]);
        assert_eq!(v[6], q[(1, 3)]);
        assert_eq!(v[8], q[(2, 3)]);
        assert_eq!(unvech(v.as_slice(), 4).unwrap(), q);
    }

    #[test]
    fn vech_rejects_asymmetric_and_bad_lengths() {
        let mut m = DMatrix::identity(3, 3);
        m[(0, 1)] = 1e-3;
        assert!(matches!(vech(&m), Err(GeometryError::NotSymmetric(_))));
        assert!(matches!(
            unvech(&[1.0; 7], 3),
            Err(GeometryError::BadVechLength { len: 7, n: 3 })
        ));
    }

    #[test]
    fn unit_sphere_through_offset_camera() {
        let q =
            DualQuadric::from_matrix(Matrix4::from_diagonal(&Vector4::new(1.0, 1.0, 1.0, -1.0)))
                .unwrap();
        let p = Matrix3x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 5.0);
        let cam = CameraMatrix::new(p).unwrap();
        let raw = p * q.matrix() * p.transpose();
        assert_relative_eq!(raw, Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -24.0)));
        let c = cam.project(&q).unwrap();
        assert_relative_eq!(
            *c.matrix(),
            Matrix3::from_diagonal(&Vector3::new(1.0 / 24.0, 1.0 / 24.0, -1.0)),
            epsilon = 1e-15
        );
        let e = c.to_ellipse().unwrap();
        assert_relative_eq!(e.semi_axes[0], 1.0 / 24f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn canonical_camera_selects_top_left_block() {
        let cam = CameraMatrix::new(Matrix3x4::identity()).unwrap();
        let e = Ellipsoid3D::new(
            Vector3::new(0.3, -0.2, 4.0),
            [1.0, 0.5, 0.2],
            *Rotation3::from_euler_angles(0.1, 0.2, 0.3).matrix(),
        )
        .unwrap();
        let q = e.dual_quadric();
        let raw = q.matrix().fixed_view::<3, 3>(0, 0).into_owned();
        let c = cam.project(&q).unwrap();
        assert_relative_eq!(*c.matrix(), raw / -raw[(2, 2)], epsilon = 1e-12);
    }

    #[test]
    fn projection_through_camera_center_is_degenerate() {
        // camera center inside the plane conic at infinity direction: quadric
        // with zero depth term
        let q = DualQuadric::from_matrix(Matrix4::from_diagonal(&Vector4::new(1.0, 1.0, 0.0, 0.0)))
            .unwrap();
        let cam = CameraMatrix::new(Matrix3x4::identity()).unwrap();
        assert_eq!(cam.project(&q), Err(GeometryError::DegenerateProjection));
    }

    #[test]
    fn decompose_examples() {
        let e = Ellipsoid3D::new(
            Vector3::new(1.0, 2.0, 3.0),
            [2.0, 1.0, 0.5],
            Matrix3::identity(),
        )
        .unwrap();
        let got = e.dual_quadric().decompose().unwrap();
        let got = got.ellipsoid().unwrap();
        assert_relative_eq!(got.center, e.center, epsilon = 1e-12);
        for k in 0..3 {
            assert_relative_eq!(got.semi_axes[k], e.semi_axes[k], epsilon = 1e-12);
        }

        let unit =
            DualQuadric::from_matrix(Matrix4::from_diagonal(&Vector4::new(1.0, 1.0, 1.0, -1.0)))
                .unwrap()
                .decompose()
                .unwrap();
        let unit = unit.ellipsoid().unwrap();
        assert_eq!(unit.center, Vector3::zeros());
        assert_eq!(unit.semi_axes, [1.0; 3]);

        let mut m = Matrix4::from_diagonal(&Vector4::new(4.0, 1.0, -0.1, -1.0));
        m[(3, 3)] = -1.0;
        match DualQuadric::from_matrix(m).unwrap().decompose().unwrap() {
            QuadricShape::Degenerate(d) => assert_eq!(d.eigenvalues, [4.0, 1.0, -0.1]),
            other => panic!("expected degenerate, got {other:?}"),
        }
    }

    #[test]
    fn decompose_needs_nonzero_last_element() {
        let q = DualQuadric::from_matrix(Matrix4::from_diagonal(&Vector4::new(1.0, 1.0, 1.0, 0.0)))
            .unwrap();
        assert_eq!(q.decompose(), Err(GeometryError::NotNormalizable));
    }

    #[test]
    fn ellipsoid_canonicalises_axis_order() {
        let r = *Rotation3::from_euler_angles(0.3, -0.5, 1.1).matrix();
        let e = Ellipsoid3D::new(Vector3::zeros(), [0.5, 2.0, 1.0], r).unwrap();
        assert_eq!(e.semi_axes, [2.0, 1.0, 0.5]);
        assert_relative_eq!(e.rotation.determinant(), 1.0, epsilon = 1e-12);
        let original = r * Matrix3::from_diagonal(&Vector3::new(0.25, 4.0, 1.0)) * r.transpose();
        assert_relative_eq!(e.shape_matrix(), original, epsilon = 1e-12);
    }

    #[test]
    fn camera_center_is_null_space() {
        let k = Matrix3::new(500.0, 0.0, 320.0, 0.0, 500.0, 240.0, 0.0, 0.0, 1.0);
        let r = *Rotation3::from_euler_angles(0.2, 0.1, -0.3).matrix();
        let c = Vector3::new(1.0, -2.0, 0.5);
        let cam = CameraMatrix::from_pose(&k, &r, &c).unwrap();
        assert_relative_eq!(cam.center().unwrap(), c, epsilon = 1e-9);
        assert!(cam.project_point(&c).norm() < 1e-9);
    }

    #[test]
    fn rank_deficient_camera_rejected() {
        let p = Matrix3x4::new(1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0);
        assert!(CameraMatrix::new(p).is_err());
    }

    #[test]
    fn angle_wrapping() {
        assert_eq!(wrap_half_turn(0.5 * PI), -0.5 * PI);
        assert_relative_eq!(wrap_half_turn(PI + 0.25), 0.25, epsilon = 1e-12);
        assert_relative_eq!(wrap_half_turn(-PI + 0.25), 0.25, epsilon = 1e-12);
    }
}
