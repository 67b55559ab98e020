//! Rigid-body poses and the rectified stereo camera model.
//!
//! Poses are stored as a 3x3 rotation matrix plus a translation vector and act
//! on column vectors: `apply(p) = R * p + t`. Long composition chains are kept
//! orthonormal by projecting the rotation back onto SO(3) at a fixed cadence.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use thiserror::Error;

/// 3D point in meters. Plain vector, camera or ground frame by context.
pub type Point3 = Vector3<f64>;

/// Compositions tolerated before the rotation is projected back onto SO(3).
const RENORM_INTERVAL: u32 = 100;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum GeometryError {
    #[error("disparity must be positive, got {0}")]
    NonPositiveDisparity(f64),
    #[error("point behind camera, z = {0}")]
    PointBehindCamera(f64),
}

/// Rigid transform in SE(3).
#[derive(Debug, Clone, Copy)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    /// Compositions accumulated since the last re-orthonormalization.
    drift: u32,
}

impl PartialEq for Pose {
    fn eq(&self, other: &Self) -> bool {
        self.rotation == other.rotation && self.translation == other.translation
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            drift: 0,
        }
    }

    /// Builds a pose from an orthonormal rotation matrix and a translation.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
            drift: 0,
        }
    }

    /// Rotation by `angle` radians about `axis`, then translation by `t`.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, t: Vector3<f64>) -> Self {
        let rotation = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        Self::new(rotation.into_inner(), t)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `self` applied after `other`: the returned pose maps `p` to
    /// `self.apply(other.apply(p))`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut rotation = self.rotation * other.rotation;
        let translation = self.rotation * other.translation + self.translation;
        let mut drift = self.drift.saturating_add(other.drift).saturating_add(1);
        if drift >= RENORM_INTERVAL {
            rotation = nearest_rotation(&rotation);
            drift = 0;
        }
        Pose {
            rotation,
            translation,
            drift,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rotation = self.rotation.transpose();
        Pose {
            rotation,
            translation: -(rotation * self.translation),
            drift: self.drift,
        }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    /// Geodesic rotation distance to `other`, in radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        rotation_angle(&rel)
    }

    /// Euclidean distance between the two translations.
    pub fn translation_distance_to(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Geodesic interpolation: linear in translation, spherical in rotation.
    /// `alpha` = 0 gives `self`, 1 gives `other`.
    pub fn interpolate(&self, other: &Pose, alpha: f64) -> Pose {
        let qa = self.unit_quaternion();
        let qb = other.unit_quaternion();
        let q = qa.slerp(&qb, alpha);
        let t = self.translation * (1.0 - alpha) + other.translation * alpha;
        Pose::new(q.to_rotation_matrix().into_inner(), t)
    }

    pub fn unit_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    /// Builds a pose from quaternion components (x, y, z, w) and a translation.
    pub fn from_quaternion(qx: f64, qy: f64, qz: f64, qw: f64, t: Vector3<f64>) -> Self {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(qw, qx, qy, qz));
        Self::new(q.to_rotation_matrix().into_inner(), t)
    }
}

/// Angle of a rotation matrix, in radians.
///
/// Uses atan2 of the skew-part norm against the trace, which stays accurate
/// for tiny angles where the plain acos-of-trace form loses half the digits.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let sin = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    )
    .norm()
        / 2.0;
    let cos = (r.trace() - 1.0) / 2.0;
    sin.atan2(cos)
}

/// Nearest rotation matrix in the Frobenius sense, via SVD.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd of 3x3 always yields u");
    let v_t = svd.v_t.expect("svd of 3x3 always yields v_t");
    let det = (u * v_t).determinant();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum())) * v_t
}

/// Rectified stereo rig: shared intrinsics, horizontal baseline in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub baseline: f64,
}

/// One stereo observation: left-image pixel plus disparity, all in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoObs {
    pub u_left: f64,
    pub v: f64,
    pub disparity: f64,
}

impl StereoCamera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, baseline: f64) -> Self {
        assert!(fx > 0.0 && fy > 0.0 && baseline > 0.0, "degenerate camera");
        Self {
            fx,
            fy,
            cx,
            cy,
            baseline,
        }
    }

    /// Back-projects a stereo observation into a camera-frame point.
    pub fn triangulate(&self, obs: &StereoObs) -> Result<Point3, GeometryError> {
        if obs.disparity <= 0.0 {
            return Err(GeometryError::NonPositiveDisparity(obs.disparity));
        }
        let z = self.fx * self.baseline / obs.disparity;
        let x = (obs.u_left - self.cx) * z / self.fx;
        let y = (obs.v - self.cy) * z / self.fy;
        Ok(Point3::new(x, y, z))
    }

    /// Projects a camera-frame point to a stereo observation.
    pub fn project(&self, p: &Point3) -> Result<StereoObs, GeometryError> {
        if p.z <= 0.0 {
            return Err(GeometryError::PointBehindCamera(p.z));
        }
        Ok(StereoObs {
            u_left: self.fx * p.x / p.z + self.cx,
            v: self.fy * p.y / p.z + self.cy,
            disparity: self.fx * self.baseline / p.z,
        })
    }
}

/// Random ground-plane motion (yaw about y, translation mostly in x-z) of the
/// given magnitude, for test case generation.
#[cfg(test)]
pub(crate) fn random_planar_motion(rng: &mut rand_chacha::ChaCha8Rng, scale: f64) -> Pose {
    use rand::Rng;
    let angle = rng.random_range(-scale..scale);
    let t = Vector3::new(
        rng.random_range(-scale..scale),
        rng.random_range(-0.2 * scale..0.2 * scale),
        rng.random_range(-scale..scale),
    );
    Pose::from_axis_angle(Vector3::y(), angle, t)
}

/// Uniform-ish random pose for test case generation.
#[cfg(test)]
pub(crate) fn random_pose(rng: &mut rand_chacha::ChaCha8Rng) -> Pose {
    use rand::Rng;
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let axis = if axis.norm() < 1e-6 {
        Vector3::x()
    } else {
        axis
    };
    let angle = rng.random_range(-3.0..3.0);
    let t = Vector3::new(
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
    );
    Pose::from_axis_angle(axis, angle, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-9;

    fn test_camera() -> StereoCamera {
        StereoCamera::new(500.0, 500.0, 0.0, 0.0, 0.12)
    }

    fn max_abs_diff(a: &Pose, b: &Pose) -> f64 {
        let dr = (a.rotation() - b.rotation()).abs().max();
        let dt = (a.translation() - b.translation()).abs().max();
        dr.max(dt)
    }

    #[test]
    fn compose_with_identity_is_identity_of_composition() {
        let p = Pose::from_axis_angle(Vector3::y(), 0.7, Vector3::new(1.0, -2.0, 0.5));
        assert!(max_abs_diff(&p.compose(&Pose::identity()), &p) < TOL);
        assert!(max_abs_diff(&Pose::identity().compose(&p), &p) < TOL);
    }

    #[test]
    fn compose_quarter_turns_about_z() {
        let a = Pose::from_axis_angle(Vector3::z(), std::f64::consts::FRAC_PI_2, Vector3::x());
        let b = Pose::from_axis_angle(Vector3::z(), std::f64::consts::FRAC_PI_2, Vector3::zeros());
        let c = a.compose(&b);
        let expected = Pose::from_axis_angle(Vector3::z(), std::f64::consts::PI, Vector3::x());
        assert!(max_abs_diff(&c, &expected) < TOL);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let p = random_pose(&mut rng);
            assert!(max_abs_diff(&p.compose(&p.inverse()), &Pose::identity()) < TOL);
            assert!(max_abs_diff(&p.inverse().compose(&p), &Pose::identity()) < TOL);
        }
    }

    #[test]
    fn inverse_of_pure_translation_negates() {
        let p = Pose::new(Matrix3::identity(), Vector3::new(1.0, 2.0, 3.0));
        let inv = p.inverse();
        assert!((inv.translation() - Vector3::new(-1.0, -2.0, -3.0)).norm() < TOL);
    }

    #[test]
    fn double_inverse_is_identity_operation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let p = random_pose(&mut rng);
            assert!(max_abs_diff(&p.inverse().inverse(), &p) < TOL);
        }
    }

    #[test]
    fn compose_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let (a, b, c) = (
                random_pose(&mut rng),
                random_pose(&mut rng),
                random_pose(&mut rng),
            );
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            assert!(max_abs_diff(&left, &right) < TOL);
        }
    }

    #[test]
    fn apply_distributes_over_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..100 {
            let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
            let p = Point3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            );
            let via_compose = a.compose(&b).apply(&p);
            let via_apply = a.apply(&b.apply(&p));
            assert!((via_compose - via_apply).norm() < TOL);
        }
    }

    #[test]
    fn apply_pure_rotation_moves_unit_x_to_unit_y() {
        let p = Pose::from_axis_angle(Vector3::z(), std::f64::consts::FRAC_PI_2, Vector3::zeros());
        let moved = p.apply(&Vector3::x());
        assert!((moved - Vector3::y()).norm() < TOL);
    }

    #[test]
    fn apply_identity_returns_input() {
        let p = Point3::new(0.3, -0.2, 4.0);
        assert_eq!(Pose::identity().apply(&p), p);
    }

    #[test]
    fn rotation_stays_orthonormal_over_long_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut chain = Pose::identity();
        for _ in 0..10_000 {
            chain = chain.compose(&random_pose(&mut rng));
        }
        let r = chain.rotation();
        let gram = r.transpose() * r;
        assert!((gram - Matrix3::identity()).abs().max() < 1e-9);
        assert!((r.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn triangulate_matches_hand_computed_depth() {
        let cam = test_camera();
        let p = cam
            .triangulate(&StereoObs {
                u_left: 0.0,
                v: 0.0,
                disparity: 60.0,
            })
            .unwrap();
        assert!((p - Point3::new(0.0, 0.0, 1.0)).norm() < TOL);
    }

    #[test]
    fn triangulate_rejects_nonpositive_disparity() {
        let cam = test_camera();
        let obs = StereoObs {
            u_left: 0.0,
            v: 0.0,
            disparity: 0.0,
        };
        assert!(matches!(
            cam.triangulate(&obs),
            Err(GeometryError::NonPositiveDisparity(_))
        ));
    }

    #[test]
    fn project_matches_hand_computed_pixels() {
        let cam = test_camera();
        let obs = cam.project(&Point3::new(0.0, 0.0, 1.0)).unwrap();
        assert!((obs.u_left - 0.0).abs() < TOL);
        assert!((obs.v - 0.0).abs() < TOL);
        assert!((obs.disparity - 60.0).abs() < TOL);

        let obs = cam.project(&Point3::new(0.1, 0.0, 1.0)).unwrap();
        assert!((obs.u_left - 50.0).abs() < TOL);
        assert!((obs.disparity - 60.0).abs() < TOL);
    }

    #[test]
    fn project_rejects_points_behind_camera() {
        let cam = test_camera();
        assert!(matches!(
            cam.project(&Point3::new(0.0, 0.0, -1.0)),
            Err(GeometryError::PointBehindCamera(_))
        ));
    }

    #[test]
    fn project_triangulate_round_trip() {
        let cam = test_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..1000 {
            let z = rng.random_range(0.5..30.0);
            let p = Point3::new(
                rng.random_range(-0.5..0.5) * z,
                rng.random_range(-0.5..0.5) * z,
                z,
            );
            let obs = cam.project(&p).unwrap();
            let back = cam.triangulate(&obs).unwrap();
            let err = cam.project(&back).unwrap();
            let px = ((err.u_left - obs.u_left).powi(2) + (err.v - obs.v).powi(2)).sqrt();
            assert!(px < 1e-6);
            assert!((back - p).norm() < 1e-9);
        }
    }

    #[test]
    fn rotation_angle_on_known_rotations() {
        let a = Pose::identity();
        let b = Pose::from_axis_angle(Vector3::z(), 30f64.to_radians(), Vector3::zeros());
        assert!(a.rotation_angle_to(&a).abs() < TOL);
        assert!((a.rotation_angle_to(&b) - 30f64.to_radians()).abs() < TOL);
        assert!((b.rotation_angle_to(&a) - 30f64.to_radians()).abs() < TOL);
    }

    #[test]
    fn interpolate_midpoint_of_quarter_turn_is_eighth_turn() {
        let a = Pose::identity();
        let b = Pose::from_axis_angle(
            Vector3::z(),
            std::f64::consts::FRAC_PI_2,
            Vector3::new(2.0, 0.0, 0.0),
        );
        let mid = a.interpolate(&b, 0.5);
        let expected = Pose::from_axis_angle(
            Vector3::z(),
            std::f64::consts::FRAC_PI_4,
            Vector3::new(1.0, 0.0, 0.0),
        );
        assert!(max_abs_diff(&mid, &expected) < TOL);
    }

    #[test]
    fn quaternion_round_trip_preserves_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let p = random_pose(&mut rng);
            let q = p.unit_quaternion();
            let back = Pose::from_quaternion(q.i, q.j, q.k, q.w, *p.translation());
            assert!(max_abs_diff(&back, &p) < 1e-9);
        }
    }
}
