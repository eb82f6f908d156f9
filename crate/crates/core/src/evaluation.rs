//! Trajectory, viewpoint and classification metrics.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::distributions::ClassId;
use crate::geometry::{Pose, RotationMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvaluationError {
    #[error("length mismatch: {0} estimated vs {1} reference")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} entries, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("rotation {0} is not orthonormal")]
    NotOrthonormal(usize),
}

/// Estimated and reference trajectories, matched by index.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPair {
    estimated: Vec<Pose>,
    reference: Vec<Pose>,
}

impl TrajectoryPair {
    pub fn new(estimated: Vec<Pose>, reference: Vec<Pose>) -> Result<Self, EvaluationError> {
        if estimated.len() != reference.len() {
            return Err(EvaluationError::LengthMismatch(estimated.len(), reference.len()));
        }
        if estimated.len() < 2 {
            return Err(EvaluationError::TooShort {
                needed: 2,
                got: estimated.len(),
            });
        }
        Ok(Self { estimated, reference })
    }

    pub fn estimated(&self) -> &[Pose] {
        &self.estimated
    }

    pub fn reference(&self) -> &[Pose] {
        &self.reference
    }

    pub fn len(&self) -> usize {
        self.estimated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimated.is_empty()
    }
}

/// Similarity mapping estimate coordinates onto the reference:
/// `y = scale · rotation · x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
    /// Set when the estimated points are all coincident, so that only the
    /// translation could be determined.
    pub degenerate: bool,
}

impl Alignment {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
            degenerate: false,
        }
    }

    pub fn apply_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation * x + self.translation
    }

    /// Maps an estimate-frame orientation (world-to-body rotation) into the
    /// reference frame.
    pub fn apply_orientation(&self, r: &RotationMatrix) -> RotationMatrix {
        RotationMatrix::from_matrix_unchecked(r.matrix() * self.rotation.transpose())
    }
}

/// Least-squares rigid (optionally similarity) alignment of `source` onto
/// `target` by the SVD method of Umeyama.
pub fn umeyama(source: &[Vector3<f64>], target: &[Vector3<f64>], with_scale: bool) -> Alignment {
    let n = source.len().min(target.len());
    if n == 0 {
        return Alignment {
            degenerate: true,
            ..Alignment::identity()
        };
    }
    let inv = 1.0 / n as f64;
    let mu_x = source[..n].iter().sum::<Vector3<f64>>() * inv;
    let mu_y = target[..n].iter().sum::<Vector3<f64>>() * inv;
    let var_x = source[..n].iter().map(|x| (x - mu_x).norm_squared()).sum::<f64>() * inv;
    if var_x < 1e-18 {
        return Alignment {
            rotation: Matrix3::identity(),
            translation: mu_y - mu_x,
            scale: 1.0,
            degenerate: true,
        };
    }
    let cov = source[..n]
        .iter()
        .zip(&target[..n])
        .map(|(x, y)| (y - mu_y) * (x - mu_x).transpose())
        .sum::<Matrix3<f64>>()
        * inv;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * v_t;
    let scale = if with_scale {
        (svd.singular_values.component_mul(&s.diagonal())).sum() / var_x
    } else {
        1.0
    };
    Alignment {
        rotation,
        translation: mu_y - scale * rotation * mu_x,
        scale,
        degenerate: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AteResult {
    pub rmse: f64,
    pub alignment: Alignment,
}

/// Absolute trajectory error: position RMSE after aligning the estimate to
/// the reference.
pub fn ate_with(pair: &TrajectoryPair, with_scale: bool) -> AteResult {
    let est: Vec<_> = pair.estimated.iter().map(|p| p.position).collect();
    let reference: Vec<_> = pair.reference.iter().map(|p| p.position).collect();
    let alignment = umeyama(&est, &reference, with_scale);
    let sq: f64 = est
        .iter()
        .zip(&reference)
        .map(|(x, y)| (alignment.apply_point(x) - y).norm_squared())
        .sum();
    AteResult {
        rmse: (sq / est.len() as f64).sqrt(),
        alignment,
    }
}

/// Rigid-alignment ATE in meters.
pub fn ate(pair: &TrajectoryPair) -> f64 {
    ate_with(pair, false).rmse
}

/// Relative pose error: RMSE of the translational error of the relative
/// motion between poses `i` and `i + delta`.
pub fn rpe(pair: &TrajectoryPair, delta: usize) -> Result<f64, EvaluationError> {
    let n = pair.len();
    if delta == 0 || n <= delta {
        return Err(EvaluationError::TooShort {
            needed: delta.max(1) + 1,
            got: n,
        });
    }
    let mut sq = 0.0;
    for i in 0..n - delta {
        let rel_est = pair.estimated[i].delta_to(&pair.estimated[i + delta]);
        let rel_ref = pair.reference[i].delta_to(&pair.reference[i + delta]);
        // Both relative translations live in frame i of their own
        // trajectory; the residual transform's translation has this norm.
        sq += (rel_est.position - rel_ref.position).norm_squared();
    }
    Ok((sq / (n - delta) as f64).sqrt())
}

/// Geodesic distance `‖log(R₁ᵀR₂)‖_F / √2`, i.e. the angle of the relative
/// rotation, in `[0, π]`.
pub fn geodesic_distance(a: &RotationMatrix, b: &RotationMatrix) -> f64 {
    a.transpose().compose(b).angle()
}

/// Pairs of estimated and true rotations.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewpointEvalSet {
    pairs: Vec<(RotationMatrix, RotationMatrix)>,
}

impl ViewpointEvalSet {
    pub fn new(pairs: Vec<(RotationMatrix, RotationMatrix)>) -> Result<Self, EvaluationError> {
        if pairs.is_empty() {
            return Err(EvaluationError::TooShort { needed: 1, got: 0 });
        }
        for (i, (a, b)) in pairs.iter().enumerate() {
            if a.orthonormality_error() > 1e-6 || b.orthonormality_error() > 1e-6 {
                return Err(EvaluationError::NotOrthonormal(i));
            }
        }
        Ok(Self { pairs })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewpointMetrics {
    /// Fraction of pairs closer than π/6.
    pub acc_pi_over_6: f64,
    /// Median geodesic error, degrees.
    pub med_err_deg: f64,
}

pub fn viewpoint_metrics(set: &ViewpointEvalSet) -> ViewpointMetrics {
    let mut errors: Vec<f64> = set.pairs.iter().map(|(a, b)| geodesic_distance(a, b)).collect();
    let hits = errors.iter().filter(|&&e| e < PI / 6.0).count();
    errors.sort_by(f64::total_cmp);
    let n = errors.len();
    let median = if n % 2 == 1 {
        errors[n / 2]
    } else {
        0.5 * (errors[n / 2 - 1] + errors[n / 2])
    };
    ViewpointMetrics {
        acc_pi_over_6: hits as f64 / n as f64,
        med_err_deg: median.to_degrees(),
    }
}

pub fn classification_accuracy(predictions: &[ClassId], truth: &[ClassId]) -> Result<f64, EvaluationError> {
    if predictions.len() != truth.len() {
        return Err(EvaluationError::LengthMismatch(predictions.len(), truth.len()));
    }
    if truth.is_empty() {
        return Err(EvaluationError::TooShort { needed: 1, got: 0 });
    }
    let hits = predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}
