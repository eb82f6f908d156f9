//! Poses with Euler-angle orientations.
//!
//! Convention: an [`EulerAngles`] triple describes a frame whose axes are
//! obtained from the world axes by an intrinsic Z (azimuth), Y (elevation),
//! X (in-plane) rotation sequence. [`euler_to_rotation`] returns the
//! world-to-frame matrix
//!
//! ```text
//! R = R_inplane · R_elevation · R_azimuth = (Rz(az) · Ry(el) · Rx(ip))ᵀ
//! ```
//!
//! so that `R · (x_world − origin)` expresses a world point in the frame.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

/// Distance from ±π/2 elevation below which the decomposition is treated as
/// gimbal locked.
pub const GIMBAL_LOCK_TOLERANCE: f64 = 1e-6;

/// Maps an angle to (−π, π].
pub fn wrap_angle(angle: f64) -> f64 {
    if angle > -PI && angle <= PI {
        return angle;
    }
    let wrapped = angle - TAU * ((angle + PI) / TAU).floor();
    // `wrapped` lies in [−π, π); move the lower endpoint to the upper one.
    if wrapped <= -PI {
        wrapped + TAU
    } else {
        wrapped
    }
}

/// Azimuth, elevation and in-plane rotation, each in (−π, π].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct EulerAngles {
    pub azimuth: f64,
    pub elevation: f64,
    pub in_plane: f64,
}

impl EulerAngles {
    /// Builds a triple, wrapping each angle to (−π, π].
    pub fn new(azimuth: f64, elevation: f64, in_plane: f64) -> Self {
        Self {
            azimuth: wrap_angle(azimuth),
            elevation: wrap_angle(elevation),
            in_plane: wrap_angle(in_plane),
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.azimuth, self.elevation, self.in_plane]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    /// Component-wise wrapped difference `self − other`.
    pub fn wrapped_difference(&self, other: &EulerAngles) -> [f64; 3] {
        [
            wrap_angle(self.azimuth - other.azimuth),
            wrap_angle(self.elevation - other.elevation),
            wrap_angle(self.in_plane - other.in_plane),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.azimuth.is_finite() && self.elevation.is_finite() && self.in_plane.is_finite()
    }
}

impl From<[f64; 3]> for EulerAngles {
    fn from(a: [f64; 3]) -> Self {
        Self::from_array(a)
    }
}

impl From<EulerAngles> for [f64; 3] {
    fn from(v: EulerAngles) -> Self {
        v.to_array()
    }
}

/// A proper rotation (orthonormal, determinant +1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Wraps a matrix without checking orthonormality.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    /// Wraps a matrix after checking `‖RᵀR − I‖_F` and `det R` against `tol`.
    pub fn try_from_matrix(m: Matrix3<f64>, tol: f64) -> Option<Self> {
        let r = Self(m);
        (r.orthonormality_error() < tol && (m.determinant() - 1.0).abs() < tol).then_some(r)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn compose(&self, rhs: &RotationMatrix) -> Self {
        Self(self.0 * rhs.0)
    }

    /// Frobenius norm of `RᵀR − I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).norm()
    }

    pub fn determinant(&self) -> f64 {
        self.0.determinant()
    }

    /// Rotation angle of this matrix, in [0, π].
    pub fn angle(&self) -> f64 {
        let cos = ((self.0.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        // atan2 keeps precision near 0 and π.
        let skew = self.0 - self.0.transpose();
        let sin = 0.5 * Vector3::new(skew[(2, 1)], skew[(0, 2)], skew[(1, 0)]).norm();
        sin.atan2(cos)
    }
}

impl std::ops::Mul<Vector3<f64>> for RotationMatrix {
    type Output = Vector3<f64>;

    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// Elementary frame rotations (transposes of the active rotations about each
/// axis).
fn frame_rotation_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0)
}

fn frame_rotation_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, -s, 0.0, 1.0, 0.0, s, 0.0, c)
}

fn frame_rotation_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, s, 0.0, -s, c)
}

fn d_frame_rotation_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, c, 0.0, -c, -s, 0.0, 0.0, 0.0, 0.0)
}

fn d_frame_rotation_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, -c, 0.0, 0.0, 0.0, c, 0.0, -s)
}

fn d_frame_rotation_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, c, 0.0, -c, -s)
}

/// World-to-frame rotation `R_inplane · R_elevation · R_azimuth`.
pub fn euler_to_rotation(v: &EulerAngles) -> RotationMatrix {
    RotationMatrix(
        frame_rotation_x(v.in_plane) * frame_rotation_y(v.elevation) * frame_rotation_z(v.azimuth),
    )
}

/// Partial derivatives of [`euler_to_rotation`] with respect to azimuth,
/// elevation and in-plane angle.
pub fn euler_to_rotation_derivatives(v: &EulerAngles) -> [Matrix3<f64>; 3] {
    let rx = frame_rotation_x(v.in_plane);
    let ry = frame_rotation_y(v.elevation);
    let rz = frame_rotation_z(v.azimuth);
    [
        rx * ry * d_frame_rotation_z(v.azimuth),
        rx * d_frame_rotation_y(v.elevation) * rz,
        d_frame_rotation_x(v.in_plane) * ry * rz,
    ]
}

/// Result of [`rotation_to_euler`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerDecomposition {
    pub angles: EulerAngles,
    /// Elevation is within [`GIMBAL_LOCK_TOLERANCE`] of ±π/2; in-plane was
    /// set to 0 and azimuth absorbs the remaining rotation.
    pub gimbal_lock: bool,
}

/// Inverse of [`euler_to_rotation`] with elevation in [−π/2, π/2].
pub fn rotation_to_euler(r: &RotationMatrix) -> EulerDecomposition {
    let m = &r.0;
    let sin_el = (-m[(0, 2)]).clamp(-1.0, 1.0);
    let elevation = sin_el.asin();
    if (elevation.abs() - FRAC_PI_2).abs() < GIMBAL_LOCK_TOLERANCE {
        // With in-plane fixed at 0 the remaining rotation is a pure azimuth
        // about the (now degenerate) axis.
        let azimuth = (-m[(1, 0)]).atan2(m[(1, 1)]);
        return EulerDecomposition {
            angles: EulerAngles::new(azimuth, elevation, 0.0),
            gimbal_lock: true,
        };
    }
    EulerDecomposition {
        angles: EulerAngles::new(
            m[(0, 1)].atan2(m[(0, 0)]),
            elevation,
            m[(1, 2)].atan2(m[(2, 2)]),
        ),
        gimbal_lock: false,
    }
}

/// Jacobian of the (non-degenerate) Euler extraction of [`rotation_to_euler`]
/// applied to a perturbation `dm` of the matrix: returns
/// `[d azimuth, d elevation, d in_plane]`.
pub fn euler_differential(m: &Matrix3<f64>, dm: &Matrix3<f64>) -> [f64; 3] {
    let (r00, r01, r02) = (m[(0, 0)], m[(0, 1)], m[(0, 2)]);
    let (r12, r22) = (m[(1, 2)], m[(2, 2)]);
    let d_az = (r00 * dm[(0, 1)] - r01 * dm[(0, 0)]) / (r00 * r00 + r01 * r01);
    let d_el = -dm[(0, 2)] / (1.0 - r02 * r02).max(f64::MIN_POSITIVE).sqrt();
    let d_ip = (r22 * dm[(1, 2)] - r12 * dm[(2, 2)]) / (r12 * r12 + r22 * r22);
    [d_az, d_el, d_ip]
}

/// Orientation of a landmark as seen from an observer:
/// `R_local = R_global · R_observerᵀ`.
pub fn local_orientation(v_global: &EulerAngles, v_observer: &EulerAngles) -> EulerAngles {
    let r = euler_to_rotation(v_global).compose(&euler_to_rotation(v_observer).transpose());
    rotation_to_euler(&r).angles
}

/// Inverse of [`local_orientation`]: `R_global = R_local · R_observer`.
pub fn global_orientation(v_local: &EulerAngles, v_observer: &EulerAngles) -> EulerAngles {
    let r = euler_to_rotation(v_local).compose(&euler_to_rotation(v_observer));
    rotation_to_euler(&r).angles
}

/// Observer pose: position in meters, orientation of the observer frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: EulerAngles,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(position: Vector3<f64>, orientation: EulerAngles) -> Self {
        Self {
            position,
            orientation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), EulerAngles::zero())
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|c| c.is_finite()) && self.orientation.is_finite()
    }

    pub fn rotation(&self) -> RotationMatrix {
        euler_to_rotation(&self.orientation)
    }

    /// Motion from `self` to `next`, expressed in the frame of `self`.
    pub fn delta_to(&self, next: &Pose) -> Pose {
        let r = self.rotation();
        Pose {
            position: r * (next.position - self.position),
            orientation: rotation_to_euler(&next.rotation().compose(&r.transpose())).angles,
        }
    }

    /// Applies a motion produced by [`Pose::delta_to`].
    pub fn compose_delta(&self, delta: &Pose) -> Pose {
        let r = self.rotation();
        Pose {
            position: self.position + r.transpose() * delta.position,
            orientation: rotation_to_euler(&delta.rotation().compose(&r)).angles,
        }
    }

    /// Frame-to-world quaternion, as used by trajectory files.
    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
            self.rotation().transpose().0,
        ))
    }

    /// Inverse of [`Pose::quaternion`].
    pub fn from_position_quaternion(position: Vector3<f64>, q: &UnitQuaternion<f64>) -> Pose {
        let r = RotationMatrix(q.to_rotation_matrix().into_inner().transpose());
        Pose::new(position, rotation_to_euler(&r).angles)
    }
}

/// Noise-free measurement of a world point from an observer:
/// `R(v_observer) · (x_world − x_observer)`.
pub fn transform_to_observer_frame(x_world: &Vector3<f64>, observer: &Pose) -> Vector3<f64> {
    observer.rotation() * (x_world - observer.position)
}

/// Back-projects an observer-frame point into the world.
pub fn transform_to_world_frame(x_local: &Vector3<f64>, observer: &Pose) -> Vector3<f64> {
    observer.position + observer.rotation().transpose() * *x_local
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn angles() -> impl Strategy<Value = EulerAngles> {
        (-PI..PI, -FRAC_PI_2 + 0.01..FRAC_PI_2 - 0.01, -PI..PI)
            .prop_map(|(a, e, i)| EulerAngles::new(a, e, i))
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_relative_eq!(wrap_angle(-PI), PI);
        assert_relative_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_relative_eq!(wrap_angle(TAU + 0.5), 0.5, epsilon = 1e-12);
        assert_relative_eq!(wrap_angle(-TAU - 0.5), -0.5, epsilon = 1e-12);
    }

    #[test]
    fn zero_angles_give_identity() {
        assert_eq!(*euler_to_rotation(&EulerAngles::zero()).matrix(), Matrix3::identity());
        let d = rotation_to_euler(&RotationMatrix::identity());
        assert_eq!(d.angles, EulerAngles::zero());
        assert!(!d.gimbal_lock);
    }

    #[test]
    fn quarter_turn_azimuth() {
        // Frame rotated +90° about z: world x axis appears as −y in the frame.
        let r = euler_to_rotation(&EulerAngles::new(FRAC_PI_2, 0.0, 0.0));
        let expected = Matrix3::new(0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(*r.matrix(), expected, epsilon = 1e-15);
        assert!(r.orthonormality_error() < 1e-12);
    }

    #[test]
    fn gimbal_lock_is_flagged() {
        let v = EulerAngles::new(0.3, FRAC_PI_2, 0.2);
        let d = rotation_to_euler(&euler_to_rotation(&v));
        assert!(d.gimbal_lock);
        assert_eq!(d.angles.in_plane, 0.0);
        // The rotation itself is still reproduced.
        let back = euler_to_rotation(&d.angles);
        assert!((back.matrix() - euler_to_rotation(&v).matrix()).norm() < 1e-9);
    }

    #[test]
    fn local_orientation_identities() {
        let v = EulerAngles::new(0.4, -0.2, 1.1);
        let same = local_orientation(&v, &EulerAngles::zero());
        assert_relative_eq!(same.azimuth, v.azimuth, epsilon = 1e-12);
        assert_relative_eq!(same.elevation, v.elevation, epsilon = 1e-12);
        assert_relative_eq!(same.in_plane, v.in_plane, epsilon = 1e-12);
        let zero = local_orientation(&v, &v);
        assert!(zero.to_array().iter().all(|a| a.abs() < 1e-12));
    }

    #[test]
    fn observer_frame_trivial_cases() {
        let x = Vector3::new(1.0, -2.0, 3.0);
        assert_eq!(transform_to_observer_frame(&x, &Pose::identity()), x);
        let observer = Pose::new(x, EulerAngles::new(0.3, 0.1, -0.2));
        assert_eq!(transform_to_observer_frame(&x, &observer), Vector3::zeros());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let v = EulerAngles::new(0.7, -0.4, 2.1);
        let d = euler_to_rotation_derivatives(&v);
        let h = 1e-6;
        for (i, di) in d.iter().enumerate() {
            let mut p = v.to_array();
            let mut m = v.to_array();
            p[i] += h;
            m[i] -= h;
            let fd = (euler_to_rotation(&EulerAngles::from_array(p)).matrix()
                - euler_to_rotation(&EulerAngles::from_array(m)).matrix())
                / (2.0 * h);
            assert!((fd - di).norm() < 1e-8);
        }
    }

    #[test]
    fn quaternion_round_trip() {
        let p = Pose::new(Vector3::new(1.0, 2.0, 3.0), EulerAngles::new(2.0, 0.3, -1.0));
        let back = Pose::from_position_quaternion(p.position, &p.quaternion());
        assert!((back.rotation().matrix() - p.rotation().matrix()).norm() < 1e-12);
    }

    proptest! {
        #[test]
        fn rotation_is_proper(a in -10.0f64..10.0, e in -10.0f64..10.0, i in -10.0f64..10.0) {
            let r = euler_to_rotation(&EulerAngles::new(a, e, i));
            prop_assert!(r.orthonormality_error() < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn euler_round_trip(v in angles()) {
            let back = rotation_to_euler(&euler_to_rotation(&v));
            prop_assert!(!back.gimbal_lock);
            let diff = back.angles.wrapped_difference(&v);
            prop_assert!(diff.iter().all(|d| d.abs() < 1e-9));
        }

        #[test]
        fn local_orientation_recomposes(g in angles(), o in angles()) {
            let local = local_orientation(&g, &o);
            let expected = euler_to_rotation(&g).compose(&euler_to_rotation(&o).transpose());
            prop_assert!((euler_to_rotation(&local).matrix() - expected.matrix()).norm() < 1e-9);
            let back = global_orientation(&local, &o);
            prop_assert!((euler_to_rotation(&back).matrix() - euler_to_rotation(&g).matrix()).norm() < 1e-9);
        }

        #[test]
        fn observer_transform_is_isometry(
            o in angles(),
            px in -50.0f64..50.0, py in -50.0f64..50.0, pz in -5.0f64..5.0,
            a in prop::array::uniform3(-50.0f64..50.0),
            b in prop::array::uniform3(-50.0f64..50.0),
        ) {
            let observer = Pose::new(Vector3::new(px, py, pz), o);
            let (a, b) = (Vector3::from(a), Vector3::from(b));
            let la = transform_to_observer_frame(&a, &observer);
            let lb = transform_to_observer_frame(&b, &observer);
            prop_assert!(((la - lb).norm() - (a - b).norm()).abs() < 1e-12 * (1.0 + (a - b).norm()));
            let back = transform_to_world_frame(&la, &observer);
            prop_assert!((back - a).norm() < 1e-12 * (1.0 + a.norm()));
        }

        #[test]
        fn delta_round_trip(a in angles(), b in angles(), d in prop::array::uniform3(-5.0f64..5.0)) {
            let p0 = Pose::new(Vector3::new(1.0, 2.0, 0.5), a);
            let p1 = Pose::new(p0.position + Vector3::from(d), b);
            let back = p0.compose_delta(&p0.delta_to(&p1));
            prop_assert!((back.position - p1.position).norm() < 1e-12);
            prop_assert!((back.rotation().matrix() - p1.rotation().matrix()).norm() < 1e-9);
        }
    }
}
