//! Residuals and analytic Jacobians of the maximization-step factors.
//!
//! Pose and landmark parameter blocks are both `[x, y, z, azimuth,
//! elevation, in_plane]`. Residuals are whitened by their standard
//! deviations.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};

use crate::geometry::{euler_differential, euler_to_rotation, euler_to_rotation_derivatives, rotation_to_euler, EulerAngles, Pose, RotationMatrix};

/// Six-parameter block shared by observer poses and landmarks.
pub type ParamBlock = Vector6<f64>;

pub fn pose_to_params(p: &Pose) -> ParamBlock {
    let o = p.orientation.to_array();
    ParamBlock::new(p.position.x, p.position.y, p.position.z, o[0], o[1], o[2])
}

pub fn params_to_pose(b: &ParamBlock) -> Pose {
    Pose::new(Vector3::new(b[0], b[1], b[2]), EulerAngles::new(b[3], b[4], b[5]))
}

fn split(b: &ParamBlock) -> (Vector3<f64>, EulerAngles) {
    // Raw angles: no wrapping, so finite differences stay continuous.
    (
        Vector3::new(b[0], b[1], b[2]),
        EulerAngles {
            azimuth: b[3],
            elevation: b[4],
            in_plane: b[5],
        },
    )
}

/// Whitened residual with Jacobians with respect to the two parameter
/// blocks it touches.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub residual: Vector6<f64>,
    pub jac_first: Matrix6<f64>,
    pub jac_second: Matrix6<f64>,
    /// Rows of the residual that carry information; orientation rows are
    /// switched off when no orientation was measured.
    pub active_rows: usize,
}

impl Linearization {
    pub fn squared_norm(&self) -> f64 {
        self.residual.rows(0, self.active_rows).norm_squared()
    }
}

/// Wrapped Euler residual `euler(M) − measured` and its differential with
/// respect to each of the supplied matrix perturbations.
fn rotation_residual(m: &Matrix3<f64>, measured: &EulerAngles) -> Vector3<f64> {
    let angles = rotation_to_euler(&RotationMatrix::from_matrix_unchecked(*m)).angles;
    Vector3::from(angles.wrapped_difference(measured))
}

fn differential_column(m: &Matrix3<f64>, dm: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::from(euler_differential(m, dm))
}

/// Detection of landmark `landmark` from observer `pose`: observer-frame
/// position `measured_position` and local orientation `measured_orientation`.
///
/// `jac_first` is with respect to the pose, `jac_second` with respect to the
/// landmark.
pub fn observation_factor(
    pose: &ParamBlock,
    landmark: &ParamBlock,
    measured_position: &Vector3<f64>,
    measured_orientation: Option<&EulerAngles>,
    sigma_position: f64,
    sigma_angle: f64,
) -> Linearization {
    let (x_t, v_t) = split(pose);
    let (p_j, v_j) = split(landmark);
    let r_t = *euler_to_rotation(&v_t).matrix();
    let dr_t = euler_to_rotation_derivatives(&v_t);
    let diff = p_j - x_t;

    let mut residual = Vector6::zeros();
    let mut jac_pose = Matrix6::zeros();
    let mut jac_lm = Matrix6::zeros();

    let inv_p = 1.0 / sigma_position;
    residual.fixed_rows_mut::<3>(0).copy_from(&((r_t * diff - measured_position) * inv_p));
    jac_pose.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-r_t * inv_p));
    for i in 0..3 {
        jac_pose.fixed_view_mut::<3, 1>(0, 3 + i).copy_from(&(dr_t[i] * diff * inv_p));
    }
    jac_lm.fixed_view_mut::<3, 3>(0, 0).copy_from(&(r_t * inv_p));

    let active_rows = match measured_orientation {
        Some(measured) => {
            let r_j = *euler_to_rotation(&v_j).matrix();
            let dr_j = euler_to_rotation_derivatives(&v_j);
            let m = r_j * r_t.transpose();
            let inv_a = 1.0 / sigma_angle;
            residual.fixed_rows_mut::<3>(3).copy_from(&(rotation_residual(&m, measured) * inv_a));
            for i in 0..3 {
                let d_lm = differential_column(&m, &(dr_j[i] * r_t.transpose()));
                let d_pose = differential_column(&m, &(r_j * dr_t[i].transpose()));
                jac_lm.fixed_view_mut::<3, 1>(3, 3 + i).copy_from(&(d_lm * inv_a));
                jac_pose.fixed_view_mut::<3, 1>(3, 3 + i).copy_from(&(d_pose * inv_a));
            }
            6
        }
        None => 3,
    };

    Linearization {
        residual,
        jac_first: jac_pose,
        jac_second: jac_lm,
        active_rows,
    }
}

/// Odometry between consecutive poses. `delta` is the measured motion in
/// the frame of `from` (see [`Pose::delta_to`]).
///
/// `jac_first` is with respect to `from`, `jac_second` with respect to `to`.
pub fn odometry_factor(
    from: &ParamBlock,
    to: &ParamBlock,
    delta: &Pose,
    sigma_position: f64,
    sigma_rotation: f64,
) -> Linearization {
    let (x_a, v_a) = split(from);
    let (x_b, v_b) = split(to);
    let r_a = *euler_to_rotation(&v_a).matrix();
    let r_b = *euler_to_rotation(&v_b).matrix();
    let dr_a = euler_to_rotation_derivatives(&v_a);
    let dr_b = euler_to_rotation_derivatives(&v_b);
    let diff = x_b - x_a;

    let mut residual = Vector6::zeros();
    let mut jac_a = Matrix6::zeros();
    let mut jac_b = Matrix6::zeros();

    let inv_p = 1.0 / sigma_position;
    residual.fixed_rows_mut::<3>(0).copy_from(&((r_a * diff - delta.position) * inv_p));
    jac_a.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-r_a * inv_p));
    jac_b.fixed_view_mut::<3, 3>(0, 0).copy_from(&(r_a * inv_p));
    for i in 0..3 {
        jac_a.fixed_view_mut::<3, 1>(0, 3 + i).copy_from(&(dr_a[i] * diff * inv_p));
    }

    let m = r_b * r_a.transpose();
    let inv_r = 1.0 / sigma_rotation;
    residual.fixed_rows_mut::<3>(3).copy_from(&(rotation_residual(&m, &delta.orientation) * inv_r));
    for i in 0..3 {
        let d_b = differential_column(&m, &(dr_b[i] * r_a.transpose()));
        let d_a = differential_column(&m, &(r_b * dr_a[i].transpose()));
        jac_b.fixed_view_mut::<3, 1>(3, 3 + i).copy_from(&(d_b * inv_r));
        jac_a.fixed_view_mut::<3, 1>(3, 3 + i).copy_from(&(d_a * inv_r));
    }

    Linearization {
        residual,
        jac_first: jac_a,
        jac_second: jac_b,
        active_rows: 6,
    }
}
