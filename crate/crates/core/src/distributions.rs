//! Closed-form probability objects: diagonal Gaussians over the shape latent
//! space, wrapped-Gaussian trigonometric angle encodings, the Bernoulli
//! objectness prior and the class-conditional latent prior table.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_angle, EulerAngles};

/// Default dimension of the shape latent space.
pub const DEFAULT_LATENT_DIM: usize = 16;
/// Default angular noise of the orientation latent, in radians.
pub const DEFAULT_ANGLE_SIGMA: f64 = 0.05;
/// Default objectness prior parameter.
pub const DEFAULT_EPSILON: f64 = 0.01;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub type ClassId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistributionError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("standard deviation must be strictly positive (component {index} is {value})")]
    NonPositiveStddev { index: usize, value: f64 },
    #[error("objectness prior epsilon must lie in (0, 0.5), got {0}")]
    InvalidEpsilon(f64),
    #[error("angle encoding has zero magnitude; direction is undefined")]
    ZeroMagnitudeEncoding,
    #[error("unknown class id {0}")]
    UnknownClass(ClassId),
    #[error("class prior table is empty")]
    EmptyTable,
}

/// Diagonal Gaussian over the shape latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    mean: DVector<f64>,
    stddev: DVector<f64>,
}

impl LatentGaussian {
    pub fn new(mean: DVector<f64>, stddev: DVector<f64>) -> Result<Self, DistributionError> {
        if mean.len() != stddev.len() {
            return Err(DistributionError::DimensionMismatch {
                expected: mean.len(),
                actual: stddev.len(),
            });
        }
        if let Some((index, &value)) = stddev.iter().enumerate().find(|(_, s)| !(**s > 0.0)) {
            return Err(DistributionError::NonPositiveStddev { index, value });
        }
        Ok(Self { mean, stddev })
    }

    /// Unit-covariance Gaussian centred at `mean`.
    pub fn standard(mean: DVector<f64>) -> Self {
        let n = mean.len();
        Self {
            mean,
            stddev: DVector::from_element(n, 1.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn stddev(&self) -> &DVector<f64> {
        &self.stddev
    }

    /// Differential entropy `D/2·log(2πe) + Σ log σ_d`.
    pub fn entropy(&self) -> f64 {
        0.5 * self.dim() as f64 * (LN_2PI + 1.0) + self.stddev.iter().map(|s| s.ln()).sum::<f64>()
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> Result<f64, DistributionError> {
        check_dim(self.dim(), x.len())?;
        Ok(diagonal_gaussian_log_pdf(x, &self.mean, &self.stddev))
    }
}

fn check_dim(expected: usize, actual: usize) -> Result<(), DistributionError> {
    if expected == actual {
        Ok(())
    } else {
        Err(DistributionError::DimensionMismatch { expected, actual })
    }
}

/// Log-density of a diagonal Gaussian. Dimensions are assumed consistent.
pub fn diagonal_gaussian_log_pdf(x: &DVector<f64>, mean: &DVector<f64>, stddev: &DVector<f64>) -> f64 {
    x.iter()
        .zip(mean.iter())
        .zip(stddev.iter())
        .map(|((x, m), s)| {
            let z = (x - m) / s;
            -0.5 * (LN_2PI + z * z) - s.ln()
        })
        .sum()
}

/// Log-density of `N(mean, I)` at `x`.
pub fn unit_gaussian_log_pdf(x: &DVector<f64>, mean: &DVector<f64>) -> f64 {
    -0.5 * (x.len() as f64 * LN_2PI + (x - mean).norm_squared())
}

/// Log-density of a scalar Gaussian.
pub fn scalar_gaussian_log_pdf(x: f64, mean: f64, sigma: f64) -> f64 {
    let z = (x - mean) / sigma;
    -0.5 * (LN_2PI + z * z) - sigma.ln()
}

/// `KL(q ‖ N(p_mean, I))` in closed form.
pub fn kl_gaussian_isotropic(q: &LatentGaussian, p_mean: &DVector<f64>) -> Result<f64, DistributionError> {
    check_dim(q.dim(), p_mean.len())?;
    let kl = 0.5
        * q.mean
            .iter()
            .zip(p_mean.iter())
            .zip(q.stddev.iter())
            .map(|((m, p), s)| (m - p) * (m - p) + s * s - 1.0 - 2.0 * s.ln())
            .sum::<f64>();
    // Guard against −0 and rounding just below zero.
    Ok(kl.max(0.0))
}

/// Bernoulli prior `p(o | l)` on objectness, with the same ε for the object
/// and background label sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct ObjectnessPrior {
    epsilon: f64,
}

impl ObjectnessPrior {
    pub fn new(epsilon: f64) -> Result<Self, DistributionError> {
        if epsilon > 0.0 && epsilon < 0.5 {
            Ok(Self { epsilon })
        } else {
            Err(DistributionError::InvalidEpsilon(epsilon))
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// `p(o = true | l)`.
    pub fn p_object(&self, label_is_object: bool) -> f64 {
        if label_is_object {
            1.0 - self.epsilon
        } else {
            self.epsilon
        }
    }
}

impl Default for ObjectnessPrior {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl TryFrom<f64> for ObjectnessPrior {
    type Error = DistributionError;

    fn try_from(epsilon: f64) -> Result<Self, Self::Error> {
        Self::new(epsilon)
    }
}

impl From<ObjectnessPrior> for f64 {
    fn from(p: ObjectnessPrior) -> f64 {
        p.epsilon
    }
}

fn xlogy_ratio(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * (x / y).ln()
    }
}

/// `KL(Bernoulli(q_true) ‖ p(o | l))` with `0·log 0 = 0`.
pub fn kl_bernoulli(q_true: f64, prior: &ObjectnessPrior, label_is_object: bool) -> f64 {
    let q = q_true.clamp(0.0, 1.0);
    let p = prior.p_object(label_is_object);
    (xlogy_ratio(q, p) + xlogy_ratio(1.0 - q, 1.0 - p)).max(0.0)
}

/// First two moments of `(sin z, cos z)` for `z ~ N(v, σ²)`.
///
/// `sigma_sin` and `sigma_cos` hold the variances of `sin z` and `cos z`
/// (the quantities the closed-form moment expressions produce).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct AngleEncoding {
    pub mu_sin: f64,
    pub mu_cos: f64,
    pub sigma_sin: f64,
    pub sigma_cos: f64,
}

impl From<[f64; 4]> for AngleEncoding {
    fn from(a: [f64; 4]) -> Self {
        Self {
            mu_sin: a[0],
            mu_cos: a[1],
            sigma_sin: a[2],
            sigma_cos: a[3],
        }
    }
}

impl From<AngleEncoding> for [f64; 4] {
    fn from(e: AngleEncoding) -> Self {
        [e.mu_sin, e.mu_cos, e.sigma_sin, e.sigma_cos]
    }
}

impl AngleEncoding {
    pub fn magnitude(&self) -> f64 {
        self.mu_sin.hypot(self.mu_cos)
    }
}

/// Wrapped-Gaussian trigonometric encoding of angle `v` with noise `sigma`.
pub fn encode_angle(v: f64, sigma: f64) -> AngleEncoding {
    let s2 = sigma * sigma;
    let shrink = (-0.5 * s2).exp();
    let (sin_v, cos_v) = v.sin_cos();
    let e1 = (-s2).exp();
    let e2_cos2v = (-2.0 * s2).exp() * (2.0 * v).cos();
    AngleEncoding {
        mu_sin: shrink * sin_v,
        mu_cos: shrink * cos_v,
        sigma_sin: 0.5 - 0.5 * e2_cos2v - e1 * sin_v * sin_v,
        sigma_cos: 0.5 + 0.5 * e2_cos2v - e1 * cos_v * cos_v,
    }
}

/// Recovers the encoded angle in (−π, π]. The shrinkage factor cancels in
/// the ratio.
pub fn decode_angle(e: &AngleEncoding) -> Result<f64, DistributionError> {
    if e.mu_sin == 0.0 && e.mu_cos == 0.0 || !e.magnitude().is_finite() {
        return Err(DistributionError::ZeroMagnitudeEncoding);
    }
    Ok(wrap_angle(e.mu_sin.atan2(e.mu_cos)))
}

/// Log-density of the observed angles under independent Gaussians centred
/// on `prior_mean`, evaluated at wrapped residuals.
pub fn angle_gaussian_logpdf(observed: &EulerAngles, prior_mean: &EulerAngles, sigma: f64) -> f64 {
    observed
        .wrapped_difference(prior_mean)
        .iter()
        .map(|r| scalar_gaussian_log_pdf(*r, 0.0, sigma))
        .sum()
}

/// Log-density of a uniform angle triple, used when no orientation
/// information is available.
pub fn uniform_angles_logpdf() -> f64 {
    -3.0 * TAU.ln()
}

/// Class-conditional latent prior `p(z | l) = N(z; μ(l), I)`, one centre per
/// class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPriorTable {
    dim: usize,
    centers: BTreeMap<ClassId, DVector<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ClassPriorDocument {
    dim: usize,
    centers: BTreeMap<String, Vec<f64>>,
}

impl ClassPriorTable {
    pub fn new(dim: usize, centers: BTreeMap<ClassId, DVector<f64>>) -> Result<Self, DistributionError> {
        for c in centers.values() {
            check_dim(dim, c.len())?;
        }
        Ok(Self { dim, centers })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn center(&self, l: ClassId) -> Result<&DVector<f64>, DistributionError> {
        self.centers.get(&l).ok_or(DistributionError::UnknownClass(l))
    }

    /// Centres in ascending class-id order.
    pub fn iter(&self) -> impl Iterator<Item = (ClassId, &DVector<f64>)> {
        self.centers.iter().map(|(k, v)| (*k, v))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(ClassPriorDocument {
            dim: self.dim,
            centers: self
                .centers
                .iter()
                .map(|(k, v)| (k.to_string(), v.iter().copied().collect()))
                .collect(),
        })
        .expect("class prior document is always serializable")
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self, serde_json::Error> {
        use serde::de::Error as _;
        let doc: ClassPriorDocument = serde_json::from_value(value)?;
        let mut centers = BTreeMap::new();
        for (key, values) in doc.centers {
            let id: ClassId = key
                .parse()
                .map_err(|_| serde_json::Error::custom(format!("invalid class id `{key}`")))?;
            centers.insert(id, DVector::from_vec(values));
        }
        Self::new(doc.dim, centers).map_err(serde_json::Error::custom)
    }
}

impl Serialize for ClassPriorTable {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ClassPriorTable {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error as _;
        let value = serde_json::Value::deserialize(deserializer)?;
        Self::from_json(value).map_err(D::Error::custom)
    }
}

/// `log N(z; μ(l), I)`.
pub fn class_logpdf(table: &ClassPriorTable, l: ClassId, z: &DVector<f64>) -> Result<f64, DistributionError> {
    let center = table.center(l)?;
    check_dim(table.dim, z.len())?;
    Ok(unit_gaussian_log_pdf(z, center))
}

/// Peak value of a `D`-dimensional unit Gaussian, `−D/2·log 2π`.
pub fn unit_gaussian_peak(dim: usize) -> f64 {
    -0.5 * dim as f64 * LN_2PI
}

/// Peak value of a scalar Gaussian with standard deviation `sigma`.
pub fn scalar_gaussian_peak(sigma: f64) -> f64 {
    -0.5 * LN_2PI - sigma.ln()
}
