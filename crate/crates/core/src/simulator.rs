//! Synthetic worlds and detection streams standing in for a trained
//! encoder. Detections follow the observation model's own distributional
//! assumptions, plus clutter.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DVector, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{KeyframeBundle, Odometry};
use crate::distributions::{encode_angle, AngleEncoding, ClassId, ClassPriorTable, LatentGaussian};
use crate::geometry::{local_orientation, transform_to_observer_frame, wrap_angle, EulerAngles, Pose};
use crate::observation::{NoiseConfig, Observation};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulatorError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    /// One counter-clockwise circle returning to the start.
    #[default]
    Loop,
    /// Lemniscate traversed once.
    FigureEight,
    /// Heading random walk kept inside the arena.
    RandomWalk,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arena {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for Arena {
    fn default() -> Self {
        Self {
            min: [-15.0, -15.0, 0.0],
            max: [15.0, 15.0, 2.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdometryNoise {
    /// Per-step translation noise, meters.
    pub sigma_position: f64,
    /// Per-step rotation noise on each Euler angle, radians.
    pub sigma_rotation: f64,
}

impl Default for OdometryNoise {
    fn default() -> Self {
        Self {
            sigma_position: 0.05,
            sigma_rotation: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub num_landmarks: usize,
    pub num_classes: usize,
    /// Standard deviation of class centers around the origin.
    pub class_separation: f64,
    pub latent_dim: usize,
    pub arena: Arena,
    pub trajectory: TrajectoryKind,
    /// Size of the loop or figure-eight, and the step length scale of the
    /// random walk.
    pub trajectory_radius: f64,
    pub num_keyframes: usize,
    /// Inclusive range of object detections per keyframe.
    pub detections_per_keyframe: [usize; 2],
    /// Mean number of clutter detections per keyframe.
    pub clutter_rate: f64,
    pub sensor_range: f64,
    pub field_of_view_deg: f64,
    pub odometry_noise: OdometryNoise,
    /// Spread of sampled detection latents around their class center.
    pub latent_sample_scale: f64,
    /// Latent standard deviation reported by the detections.
    pub reported_latent_std: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            num_landmarks: 20,
            num_classes: 10,
            class_separation: 4.0,
            latent_dim: 16,
            arena: Arena::default(),
            trajectory: TrajectoryKind::Loop,
            trajectory_radius: 10.0,
            num_keyframes: 100,
            detections_per_keyframe: [3, 8],
            clutter_rate: 0.5,
            sensor_range: 30.0,
            field_of_view_deg: 360.0,
            odometry_noise: OdometryNoise::default(),
            latent_sample_scale: 1.0,
            reported_latent_std: 1.0,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), SimulatorError> {
        let bad = |m: &str| Err(SimulatorError::InvalidSpec(m.to_string()));
        if self.num_classes == 0 {
            return bad("num_classes must be positive");
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive");
        }
        if self.num_keyframes == 0 {
            return bad("num_keyframes must be positive");
        }
        if self.detections_per_keyframe[0] > self.detections_per_keyframe[1] {
            return bad("detections_per_keyframe must be an ordered [min, max] pair");
        }
        if (0..3).any(|i| !(self.arena.min[i] <= self.arena.max[i])) {
            return bad("arena min must not exceed max");
        }
        let non_negative = [
            self.class_separation,
            self.clutter_rate,
            self.sensor_range,
            self.odometry_noise.sigma_position,
            self.odometry_noise.sigma_rotation,
            self.latent_sample_scale,
        ];
        if non_negative.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("scales, rates and noise levels must be finite and non-negative");
        }
        if !(self.field_of_view_deg > 0.0 && self.field_of_view_deg <= 360.0) {
            return bad("field_of_view_deg must lie in (0, 360]");
        }
        if !(self.reported_latent_std > 0.0 && self.reported_latent_std.is_finite()) {
            return bad("reported_latent_std must be positive");
        }
        if !(self.trajectory_radius > 0.0) {
            return bad("trajectory_radius must be positive");
        }
        Ok(())
    }

    /// Whether a world-frame point is detectable from `pose`.
    pub fn is_visible(&self, pose: &Pose, point: &Vector3<f64>) -> bool {
        let local = transform_to_observer_frame(point, pose);
        if local.norm() > self.sensor_range {
            return false;
        }
        self.field_of_view_deg >= 360.0 || local.y.atan2(local.x).abs() <= 0.5 * self.field_of_view_deg.to_radians()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueLandmark {
    pub id: u64,
    pub class: ClassId,
    #[serde(with = "crate::observation::vector3_as_array")]
    pub position: Vector3<f64>,
    pub orientation: EulerAngles,
}

/// True origin of a detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationLabel {
    Landmark(u64),
    Clutter,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub trajectory: Vec<Pose>,
    pub landmarks: Vec<TrueLandmark>,
    /// One label per detection, per keyframe; filled by
    /// [`generate_observations`].
    pub labels: Vec<Vec<ObservationLabel>>,
}

impl GroundTruth {
    pub fn landmark(&self, id: u64) -> Option<&TrueLandmark> {
        self.landmarks.iter().find(|l| l.id == id)
    }
}

fn trajectory(spec: &WorldSpec, rng: &mut ChaCha8Rng) -> Vec<Pose> {
    let n = spec.num_keyframes;
    let r = spec.trajectory_radius;
    let z = 0.5 * (spec.arena.min[2] + spec.arena.max[2]);
    let planar = |x: f64, y: f64, heading: f64| Pose::new(Vector3::new(x, y, z), EulerAngles::new(heading, 0.0, 0.0));
    match spec.trajectory {
        TrajectoryKind::Loop => (0..n)
            .map(|t| {
                let th = 2.0 * PI * t as f64 / n as f64;
                planar(r * th.cos(), r * th.sin(), th + 0.5 * PI)
            })
            .collect(),
        TrajectoryKind::FigureEight => (0..n)
            .map(|t| {
                let th = 2.0 * PI * t as f64 / n as f64;
                let (x, y) = (r * th.sin(), 0.5 * r * (2.0 * th).sin());
                let (dx, dy) = (r * th.cos(), r * (2.0 * th).cos());
                planar(x, y, dy.atan2(dx))
            })
            .collect(),
        TrajectoryKind::RandomWalk => {
            let step = 2.0 * PI * r / n.max(1) as f64;
            let turn = Normal::new(0.0, 0.2).expect("valid");
            let half = [
                0.5 * (spec.arena.max[0] - spec.arena.min[0]),
                0.5 * (spec.arena.max[1] - spec.arena.min[1]),
            ];
            let centre = [spec.arena.min[0] + half[0], spec.arena.min[1] + half[1]];
            let (mut x, mut y, mut heading) = (centre[0], centre[1], 0.0f64);
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                out.push(planar(x, y, wrap_angle(heading)));
                heading += turn.sample(rng);
                let (nx, ny) = (x + step * heading.cos(), y + step * heading.sin());
                if (nx - centre[0]).abs() > 0.8 * half[0] || (ny - centre[1]).abs() > 0.8 * half[1] {
                    // Steer back toward the arena centre.
                    heading = (centre[1] - y).atan2(centre[0] - x);
                }
                x += step * heading.cos();
                y += step * heading.sin();
            }
            out
        }
    }
}

/// Samples trajectory, landmarks and class centers. Deterministic in
/// `spec.seed`.
pub fn generate_world(spec: &WorldSpec) -> Result<(GroundTruth, ClassPriorTable), SimulatorError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Class centers use their own stream so that the geometry of a seed does
    // not depend on the latent dimension.
    let mut center_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    center_rng.set_stream(2);

    let center_noise = Normal::new(0.0, spec.class_separation).expect("validated scale");
    let centers: BTreeMap<ClassId, DVector<f64>> = (0..spec.num_classes as ClassId)
        .map(|c| (c, DVector::from_fn(spec.latent_dim, |_, _| center_noise.sample(&mut center_rng))))
        .collect();
    let table = ClassPriorTable::new(spec.latent_dim, centers).map_err(|e| SimulatorError::InvalidSpec(e.to_string()))?;

    let trajectory = trajectory(spec, &mut rng);
    let landmarks = (0..spec.num_landmarks as u64)
        .map(|id| {
            let position = Vector3::from_fn(|i, _| {
                let (lo, hi) = (spec.arena.min[i], spec.arena.max[i]);
                if lo < hi {
                    rng.random_range(lo..hi)
                } else {
                    lo
                }
            });
            TrueLandmark {
                id,
                class: rng.random_range(0..spec.num_classes as ClassId),
                position,
                orientation: EulerAngles::new(
                    rng.random_range(-PI..PI),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                ),
            }
        })
        .collect();

    Ok((
        GroundTruth {
            trajectory,
            landmarks,
            labels: Vec::new(),
        },
        table,
    ))
}

fn encode_noisy(angles: &EulerAngles, sigma: f64, rng: &mut ChaCha8Rng) -> [AngleEncoding; 3] {
    // The encoder's posterior mean scatters around the truth with the same
    // spread it reports.
    let noise = Normal::new(0.0, sigma).expect("non-negative sigma");
    angles.to_array().map(|v| encode_angle(v + noise.sample(rng), sigma))
}

/// Samples detections and odometry along the true trajectory. Returns the
/// bundles and, per keyframe, the true origin of every detection.
pub fn generate_observations(
    gt: &GroundTruth,
    table: &ClassPriorTable,
    noise: &NoiseConfig,
    spec: &WorldSpec,
) -> Result<(Vec<KeyframeBundle>, Vec<Vec<ObservationLabel>>), SimulatorError> {
    spec.validate()?;
    if table.dim() != spec.latent_dim {
        return Err(SimulatorError::InvalidSpec(format!(
            "class table dimension {} differs from latent_dim {}",
            table.dim(),
            spec.latent_dim
        )));
    }
    if !(noise.sigma_position >= 0.0 && noise.sigma_angle >= 0.0) {
        return Err(SimulatorError::InvalidSpec("noise levels must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    // Latents draw from a separate stream: changing the latent dimension
    // leaves detections, positions and odometry untouched.
    let mut latent_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    latent_rng.set_stream(3);

    let d = spec.latent_dim;
    let pos_noise = Normal::new(0.0, noise.sigma_position).expect("checked");
    let latent_noise = Normal::new(0.0, spec.latent_sample_scale).expect("validated");
    let clutter_latent = Normal::new(0.0, spec.class_separation + 3.0).expect("validated");
    let odo_pos = Normal::new(0.0, spec.odometry_noise.sigma_position).expect("validated");
    let odo_rot = Normal::new(0.0, spec.odometry_noise.sigma_rotation).expect("validated");
    let clutter_count = (spec.clutter_rate > 0.0).then(|| Poisson::new(spec.clutter_rate).expect("positive rate"));
    let clutter_objectness = Beta::new(1.0, 20.0).expect("valid shape");
    let reported_std = DVector::from_element(d, spec.reported_latent_std);
    let eps = noise.epsilon_objectness;

    let mut bundles = Vec::with_capacity(gt.trajectory.len());
    let mut labels = Vec::with_capacity(gt.trajectory.len());
    for (t, pose) in gt.trajectory.iter().enumerate() {
        let odometry = (t > 0).then(|| {
            let truth = gt.trajectory[t - 1].delta_to(pose);
            let o = truth.orientation.to_array();
            Odometry {
                delta: Pose::new(
                    truth.position + Vector3::from_fn(|_, _| odo_pos.sample(&mut rng)),
                    EulerAngles::new(
                        o[0] + odo_rot.sample(&mut rng),
                        o[1] + odo_rot.sample(&mut rng),
                        o[2] + odo_rot.sample(&mut rng),
                    ),
                ),
                sigma_position: spec.odometry_noise.sigma_position,
                sigma_rotation: spec.odometry_noise.sigma_rotation,
            }
        });

        let visible: Vec<&TrueLandmark> = gt.landmarks.iter().filter(|l| spec.is_visible(pose, &l.position)).collect();
        let [lo, hi] = spec.detections_per_keyframe;
        let count = rng.random_range(lo..=hi).min(visible.len());
        let chosen: Vec<&TrueLandmark> = rand::seq::index::sample(&mut rng, visible.len(), count)
            .into_iter()
            .map(|i| visible[i])
            .collect();

        let mut detections: Vec<(Observation, ObservationLabel)> = Vec::new();
        for lm in chosen {
            let center = table.center(lm.class).map_err(|e| SimulatorError::InvalidSpec(e.to_string()))?;
            let position = transform_to_observer_frame(&lm.position, pose) + Vector3::from_fn(|_, _| pos_noise.sample(&mut rng));
            let mean = center + DVector::from_fn(d, |_, _| latent_noise.sample(&mut latent_rng));
            let local = local_orientation(&lm.orientation, &pose.orientation);
            let obs = Observation::new(
                position,
                LatentGaussian::new(mean, reported_std.clone()).expect("validated stddev"),
                encode_noisy(&local, noise.sigma_angle, &mut rng),
                1.0 - eps,
            )
            .map_err(|e| SimulatorError::InvalidSpec(e.to_string()))?;
            detections.push((obs, ObservationLabel::Landmark(lm.id)));
        }

        let n_clutter = clutter_count.map_or(0, |p| p.sample(&mut rng) as usize);
        for _ in 0..n_clutter {
            let world = Vector3::from_fn(|i, _| {
                let (lo, hi) = (spec.arena.min[i], spec.arena.max[i]);
                if lo < hi {
                    rng.random_range(lo..hi)
                } else {
                    lo
                }
            });
            let angles = EulerAngles::new(rng.random_range(-PI..PI), rng.random_range(-PI..PI), rng.random_range(-PI..PI));
            let obs = Observation::new(
                transform_to_observer_frame(&world, pose),
                LatentGaussian::new(DVector::from_fn(d, |_, _| clutter_latent.sample(&mut latent_rng)), reported_std.clone())
                    .expect("validated stddev"),
                angles.to_array().map(|v| encode_angle(v, noise.sigma_angle)),
                clutter_objectness.sample(&mut rng),
            )
            .map_err(|e| SimulatorError::InvalidSpec(e.to_string()))?;
            detections.push((obs, ObservationLabel::Clutter));
        }
        detections.shuffle(&mut rng);

        let (observations, frame_labels): (Vec<_>, Vec<_>) = detections.into_iter().unzip();
        bundles.push(KeyframeBundle {
            index: t,
            observations,
            odometry,
        });
        labels.push(frame_labels);
    }
    Ok((bundles, labels))
}

/// A generated world with its detection stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub ground_truth: GroundTruth,
    pub table: ClassPriorTable,
    pub bundles: Vec<KeyframeBundle>,
}

/// [`generate_world`] followed by [`generate_observations`], with the labels
/// stored in the ground truth.
pub fn simulate(spec: &WorldSpec, noise: &NoiseConfig) -> Result<Simulation, SimulatorError> {
    let (mut ground_truth, table) = generate_world(spec)?;
    let (bundles, labels) = generate_observations(&ground_truth, &table, noise, spec)?;
    ground_truth.labels = labels;
    Ok(Simulation {
        ground_truth,
        table,
        bundles,
    })
}
