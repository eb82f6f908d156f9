//! Approximate per-observation likelihood built from the closed-form κ
//! factors, the computable KL part of the per-observation lower bound, and
//! maximum-likelihood label and pose estimates.

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{
    angle_gaussian_logpdf, decode_angle, kl_bernoulli, kl_gaussian_isotropic, unit_gaussian_log_pdf,
    uniform_angles_logpdf, AngleEncoding, ClassId, ClassPriorTable, DistributionError, LatentGaussian,
    ObjectnessPrior, DEFAULT_ANGLE_SIGMA, DEFAULT_EPSILON,
};
use crate::geometry::{local_orientation, transform_to_observer_frame, wrap_angle, EulerAngles, Pose};

/// Lower bound applied to each log-likelihood entry before normalization.
pub const LOG_DENSITY_FLOOR: f64 = -700.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObservationError {
    #[error("objectness must lie in [0, 1], got {0}")]
    InvalidObjectness(f64),
    #[error("non-finite observation position")]
    NonFinitePosition,
    #[error(transparent)]
    Distribution(#[from] DistributionError),
}

/// One detection in a keyframe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ObservationRecord", into = "ObservationRecord")]
pub struct Observation {
    /// Object position in the observer frame, meters.
    pub position: Vector3<f64>,
    pub shape_latent: LatentGaussian,
    /// Azimuth, elevation and in-plane encodings, in that order.
    pub angle_encodings: [AngleEncoding; 3],
    /// `q(o = true | I)`.
    pub objectness: f64,
}

impl Observation {
    pub fn new(
        position: Vector3<f64>,
        shape_latent: LatentGaussian,
        angle_encodings: [AngleEncoding; 3],
        objectness: f64,
    ) -> Result<Self, ObservationError> {
        if !(0.0..=1.0).contains(&objectness) {
            return Err(ObservationError::InvalidObjectness(objectness));
        }
        if !position.iter().all(|c| c.is_finite()) {
            return Err(ObservationError::NonFinitePosition);
        }
        Ok(Self {
            position,
            shape_latent,
            angle_encodings,
            objectness,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.shape_latent.dim()
    }

    /// Maximum-likelihood local orientation of the detected object.
    pub fn decoded_orientation(&self) -> Result<EulerAngles, DistributionError> {
        mle_pose(&self.angle_encodings)
    }
}

/// Wire form of an [`Observation`]: one JSON object per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationRecord {
    pub position: [f64; 3],
    pub latent_mean: Vec<f64>,
    pub latent_std: Vec<f64>,
    pub angles_encoding: [[f64; 4]; 3],
    pub objectness: f64,
}

impl TryFrom<ObservationRecord> for Observation {
    type Error = ObservationError;

    fn try_from(r: ObservationRecord) -> Result<Self, Self::Error> {
        let latent = LatentGaussian::new(DVector::from_vec(r.latent_mean), DVector::from_vec(r.latent_std))?;
        Observation::new(
            Vector3::from(r.position),
            latent,
            r.angles_encoding.map(AngleEncoding::from),
            r.objectness,
        )
    }
}

impl From<Observation> for ObservationRecord {
    fn from(o: Observation) -> Self {
        ObservationRecord {
            position: o.position.into(),
            latent_mean: o.shape_latent.mean().iter().copied().collect(),
            latent_std: o.shape_latent.stddev().iter().copied().collect(),
            angles_encoding: o.angle_encodings.map(<[f64; 4]>::from),
            objectness: o.objectness,
        }
    }
}

/// Map entry: latent class mean, global position and global orientation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: u64,
    #[serde(with = "dvector_as_vec")]
    pub latent_mean: DVector<f64>,
    #[serde(with = "vector3_as_array")]
    pub position: Vector3<f64>,
    pub orientation: EulerAngles,
    /// Association weight collected in the latest expectation step.
    pub weight_mass: f64,
    /// EM iteration in which the landmark was created.
    #[serde(default, skip_serializing)]
    pub born_iteration: usize,
}

pub(crate) mod dvector_as_vec {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

pub(crate) mod vector3_as_array {
    use nalgebra::Vector3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector3<f64>, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y, v.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector3<f64>, D::Error> {
        Ok(Vector3::from(<[f64; 3]>::deserialize(d)?))
    }
}

/// Measurement noise of the observation model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Isotropic standard deviation of observer-frame positions, meters.
    pub sigma_position: f64,
    /// Standard deviation of the orientation latent, radians.
    pub sigma_angle: f64,
    pub epsilon_objectness: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma_position: 0.2,
            sigma_angle: DEFAULT_ANGLE_SIGMA,
            epsilon_objectness: DEFAULT_EPSILON,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.sigma_position > 0.0 && self.sigma_angle > 0.0) {
            return Err("noise standard deviations must be positive".into());
        }
        ObjectnessPrior::new(self.epsilon_objectness).map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn objectness_prior(&self) -> ObjectnessPrior {
        ObjectnessPrior::new(self.epsilon_objectness).unwrap_or_default()
    }
}

/// `κ^o = exp(−KL(Bernoulli(objectness) ‖ p(o | l ∈ object labels)))`.
pub fn kappa_objectness(objectness: f64, prior: &ObjectnessPrior) -> f64 {
    (-kl_bernoulli(objectness, prior, true)).exp()
}

/// The four additive terms of [`observation_log_likelihood`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikelihoodTerms {
    pub objectness: f64,
    pub position: f64,
    pub latent: f64,
    pub orientation: f64,
}

impl LikelihoodTerms {
    pub fn total(&self) -> f64 {
        self.objectness + self.position + self.latent + self.orientation
    }
}

/// Evaluates each term of the approximate log-likelihood of `obs` having
/// been produced by `lm` seen from `observer`.
pub fn observation_log_likelihood_terms(
    obs: &Observation,
    lm: &Landmark,
    observer: &Pose,
    noise: &NoiseConfig,
) -> LikelihoodTerms {
    let predicted = transform_to_observer_frame(&lm.position, observer);
    let orientation = match obs.decoded_orientation() {
        Ok(decoded) => {
            let expected = local_orientation(&lm.orientation, &observer.orientation);
            angle_gaussian_logpdf(&decoded, &expected, noise.sigma_angle)
        }
        Err(_) => uniform_angles_logpdf(),
    };
    LikelihoodTerms {
        objectness: -kl_bernoulli(obs.objectness, &noise.objectness_prior(), true),
        position: isotropic_log_pdf(&obs.position, &predicted, noise.sigma_position),
        latent: unit_gaussian_log_pdf(obs.shape_latent.mean(), &lm.latent_mean),
        orientation,
    }
}

/// `log κ^o + log p(x^s | x^x, x^ℓ) + log p(z = μ^sl | μ^l) + log p(z = v^s | v^local)`.
pub fn observation_log_likelihood(obs: &Observation, lm: &Landmark, observer: &Pose, noise: &NoiseConfig) -> f64 {
    observation_log_likelihood_terms(obs, lm, observer, noise).total()
}

fn isotropic_log_pdf(x: &Vector3<f64>, mean: &Vector3<f64>, sigma: f64) -> f64 {
    let r2 = (x - mean).norm_squared() / (sigma * sigma);
    -0.5 * r2 - 1.5 * (2.0 * std::f64::consts::PI).ln() - 3.0 * sigma.ln()
}

/// Closed-form KL terms of the per-observation lower bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboKl {
    pub objectness: f64,
    pub shape: f64,
    pub orientation: f64,
}

impl ElboKl {
    /// Negated sum: the computable part of the per-observation lower bound.
    pub fn elbo_contribution(&self) -> f64 {
        -(self.objectness + self.shape + self.orientation)
    }
}

/// Standard deviation implied by the shrinkage of an encoding:
/// `|μ|² = exp(−σ²)`.
pub fn encoding_sigma(e: &AngleEncoding) -> f64 {
    let m2 = e.mu_sin * e.mu_sin + e.mu_cos * e.mu_cos;
    if m2 >= 1.0 {
        0.0
    } else {
        (-m2.ln()).sqrt()
    }
}

/// KL terms for objectness, shape latent and orientation latent.
///
/// The orientation term compares, per angle, the Gaussian implied by the
/// observed encoding (mean from the decoded angle, spread from the
/// shrinkage factor) with `N(true angle, σ_angle²)`, at wrapped residuals.
pub fn elbo_kl_components(
    obs: &Observation,
    true_label: ClassId,
    true_local_orientation: &EulerAngles,
    table: &ClassPriorTable,
    prior: &ObjectnessPrior,
    sigma_angle: f64,
) -> Result<ElboKl, DistributionError> {
    let shape = kl_gaussian_isotropic(&obs.shape_latent, table.center(true_label)?)?;
    let truth = true_local_orientation.to_array();
    let mut orientation = 0.0;
    for (e, v) in obs.angle_encodings.iter().zip(truth) {
        let mean = decode_angle(e)?;
        let sq = encoding_sigma(e);
        let r = wrap_angle(mean - v);
        let kl = if sq == 0.0 {
            f64::INFINITY
        } else {
            (sigma_angle / sq).ln() + (sq * sq + r * r) / (2.0 * sigma_angle * sigma_angle) - 0.5
        };
        orientation += kl.max(0.0);
    }
    Ok(ElboKl {
        objectness: kl_bernoulli(obs.objectness, prior, true),
        shape,
        orientation,
    })
}

/// Maximum-likelihood class: the nearest centre, ties to the smallest id.
pub fn mle_label(z: &DVector<f64>, table: &ClassPriorTable) -> Result<ClassId, DistributionError> {
    let mut best: Option<(ClassId, f64)> = None;
    for (id, center) in table.iter() {
        if center.len() != z.len() {
            return Err(DistributionError::DimensionMismatch {
                expected: center.len(),
                actual: z.len(),
            });
        }
        let d2 = (z - center).norm_squared();
        if best.is_none_or(|(_, b)| d2 < b) {
            best = Some((id, d2));
        }
    }
    best.map(|(id, _)| id).ok_or(DistributionError::EmptyTable)
}

/// Maximum-likelihood orientation: the decoded angles themselves.
pub fn mle_pose(encodings: &[AngleEncoding; 3]) -> Result<EulerAngles, DistributionError> {
    Ok(EulerAngles::new(
        decode_angle(&encodings[0])?,
        decode_angle(&encodings[1])?,
        decode_angle(&encodings[2])?,
    ))
}
