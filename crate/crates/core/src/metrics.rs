//! Accuracy measures between estimated and ground-truth ellipsoids.

use crate::geometry::{CameraMatrix, Ellipsoid3D, GeometryError};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Default Monte Carlo sample count for [`iou_3d`].
pub const DEFAULT_IOU_SAMPLES: usize = 100_000;

/// Volumetric intersection over union, estimated from `n_samples` uniform
/// points in the axis-aligned box enclosing both ellipsoids. Both
/// ellipsoids see the same point stream, so the estimate is exactly
/// symmetric in its arguments.
pub fn iou_3d(a: &Ellipsoid3D, b: &Ellipsoid3D, n_samples: usize, seed: u64) -> f64 {
    let (a_lo, a_hi) = aabb(a);
    let (b_lo, b_hi) = aabb(b);
    if (0..3).any(|k| a_hi[k] < b_lo[k] || b_hi[k] < a_lo[k]) {
        return 0.0;
    }
    let lo = a_lo.zip_map(&b_lo, f64::min);
    let hi = a_hi.zip_map(&b_hi, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut in_a, mut in_b, mut in_both) = (0u64, 0u64, 0u64);
    for _ in 0..n_samples.max(1) {
        let p = Vector3::from_fn(|k, _| lo[k] + (hi[k] - lo[k]) * rng.random::<f64>());
        let ia = a.contains(&p);
        let ib = b.contains(&p);
        in_a += ia as u64;
        in_b += ib as u64;
        in_both += (ia && ib) as u64;
    }
    let union = in_a + in_b - in_both;
    if union == 0 {
        0.0
    } else {
        in_both as f64 / union as f64
    }
}

fn aabb(e: &Ellipsoid3D) -> (Vector3<f64>, Vector3<f64>) {
    let h = e.aabb_half_extents();
    (e.center - h, e.center + h)
}

/// Center distance and mean absolute difference of the sorted semi-axes.
pub fn pose_metrics(est: &Ellipsoid3D, gt: &Ellipsoid3D) -> (f64, f64) {
    let translation = (est.center - gt.center).norm();
    let mut ea = est.semi_axes;
    let mut ga = gt.semi_axes;
    ea.sort_by(|x, y| y.total_cmp(x));
    ga.sort_by(|x, y| y.total_cmp(x));
    let axis = ea.iter().zip(&ga).map(|(x, y)| (x - y).abs()).sum::<f64>() / 3.0;
    (translation, axis)
}

/// Largest angle (degrees) between the rays from `object_center` to the
/// camera centers.
pub fn baseline_angle(
    cams: &[CameraMatrix],
    object_center: &Vector3<f64>,
) -> Result<f64, GeometryError> {
    if cams.len() < 2 {
        return Err(GeometryError::DegenerateInput(format!(
            "baseline angle needs at least 2 cameras, got {}",
            cams.len()
        )));
    }
    if object_center.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::DegenerateInput(
            "object center is not finite".into(),
        ));
    }
    let rays = cams
        .iter()
        .map(|c| {
            let ray = c.center()? - object_center;
            let n = ray.norm();
            if n <= 1e-12 * object_center.norm().max(1.0) {
                return Err(GeometryError::DegenerateInput(
                    "camera center coincides with the object center".into(),
                ));
            }
            Ok(ray / n)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut best = 0.0f64;
    for i in 0..rays.len() {
        for j in i + 1..rays.len() {
            let angle = rays[i].cross(&rays[j]).norm().atan2(rays[i].dot(&rays[j]));
            best = best.max(angle);
        }
    }
    Ok(best.to_degrees())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::look_at;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix3, Rotation3};

    fn cam_at(eye: Vector3<f64>) -> CameraMatrix {
        let k = Matrix3::new(500.0, 0.0, 320.0, 0.0, 500.0, 240.0, 0.0, 0.0, 1.0);
        let r = look_at(&eye, &Vector3::zeros()).unwrap();
        CameraMatrix::from_pose(&k, &r, &eye).unwrap()
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let e = Ellipsoid3D::new(
            Vector3::new(0.3, 0.1, -0.2),
            [1.0, 0.5, 0.3],
            *Rotation3::from_euler_angles(0.4, 0.2, 0.1).matrix(),
        )
        .unwrap();
        let same = iou_3d(&e, &e, 20_000, 1);
        assert!((same - 1.0).abs() <= 0.005);

        let far = Ellipsoid3D::sphere(Vector3::new(10.0, 0.0, 0.0), 1.0).unwrap();
        assert_eq!(iou_3d(&e, &far, 20_000, 1), 0.0);
        // overlapping boxes but disjoint bodies
        let a = Ellipsoid3D::sphere(Vector3::zeros(), 1.0).unwrap();
        let b = Ellipsoid3D::sphere(Vector3::new(1.9, 1.9, 0.0), 1.0).unwrap();
        assert_eq!(iou_3d(&a, &b, 20_000, 3), 0.0);
    }

    #[test]
    fn iou_concentric_spheres() {
        let a = Ellipsoid3D::sphere(Vector3::zeros(), 1.0).unwrap();
        let b = Ellipsoid3D::sphere(Vector3::zeros(), 2.0).unwrap();
        let v = iou_3d(&a, &b, DEFAULT_IOU_SAMPLES, 42);
        assert!((v - 0.125).abs() <= 0.01, "iou {v}");
    }

    #[test]
    fn iou_is_symmetric() {
        let a = Ellipsoid3D::sphere(Vector3::zeros(), 1.0).unwrap();
        let b = Ellipsoid3D::new(
            Vector3::new(0.5, 0.2, 0.0),
            [1.2, 0.6, 0.4],
            Matrix3::identity(),
        )
        .unwrap();
        assert_eq!(iou_3d(&a, &b, 10_000, 9), iou_3d(&b, &a, 10_000, 9));
    }

    #[test]
    fn pose_metric_examples() {
        let gt = Ellipsoid3D::new(Vector3::zeros(), [2.0, 1.0, 0.5], Matrix3::identity()).unwrap();
        assert_eq!(pose_metrics(&gt, &gt), (0.0, 0.0));

        let est = Ellipsoid3D::new(Vector3::zeros(), [2.0, 1.0, 0.4], Matrix3::identity()).unwrap();
        let (t, a) = pose_metrics(&est, &gt);
        assert_eq!(t, 0.0);
        assert_relative_eq!(a, 0.1 / 3.0, epsilon = 1e-15);

        let mut moved = gt;
        moved.center.x += 0.3;
        let (t, a) = pose_metrics(&moved, &gt);
        assert_relative_eq!(t, 0.3, epsilon = 1e-15);
        assert_eq!(a, 0.0);
    }

    #[test]
    fn baseline_angle_examples() {
        let half = 4.3f64.to_radians() / 2.0;
        let a = cam_at(Vector3::new(5.0 * half.sin(), 0.5, 5.0 * half.cos()));
        let b = cam_at(Vector3::new(-5.0 * half.sin(), 0.5, 5.0 * half.cos()));
        // the 0.5 height tilts the rays slightly; measure from the arc center
        let center = Vector3::new(0.0, 0.5, 0.0);
        assert_relative_eq!(
            baseline_angle(&[a, b], &center).unwrap(),
            4.3,
            epsilon = 1e-9
        );

        assert_relative_eq!(
            baseline_angle(&[a, a], &center).unwrap(),
            0.0,
            epsilon = 1e-6
        );

        let c = cam_at(Vector3::new(0.0, 0.5, 5.0));
        let d = cam_at(Vector3::new(0.0, 0.5, -5.0));
        assert_relative_eq!(
            baseline_angle(&[c, d], &center).unwrap(),
            180.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn baseline_angle_errors() {
        let c = cam_at(Vector3::new(0.0, 0.5, 5.0));
        assert!(baseline_angle(&[c], &Vector3::zeros()).is_err());
        assert!(baseline_angle(&[c, c], &Vector3::new(0.0, 0.5, 5.0)).is_err());
    }
}
