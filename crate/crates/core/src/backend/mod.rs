//! EM SLAM back-end: soft data association in the expectation step, joint
//! pose/landmark optimization and closed-form latent means in the
//! maximization step, and landmark creation and pruning.

pub mod factors;
pub mod linear;
mod optimize;

use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{
    weights_exact, weights_with_null, AssociationConstraint, AssociationError, AssociationWeights, LikelihoodMatrix,
    EXACT_SIZE_LIMIT,
};
use crate::distributions::{scalar_gaussian_peak, unit_gaussian_log_pdf, unit_gaussian_peak};
use crate::geometry::{euler_to_rotation, global_orientation, transform_to_world_frame, EulerAngles, Pose};
use crate::observation::{observation_log_likelihood, Landmark, NoiseConfig, Observation};

pub use optimize::{maximize_poses, pose_objective, GaussNewtonReport};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("no keyframes to process")]
    NoKeyframes,
    #[error("keyframe {0} has no odometry link to its predecessor")]
    MissingOdometry(usize),
    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),
    #[error("latent dimension mismatch: expected {expected}, got {actual}")]
    LatentDimension { expected: usize, actual: usize },
    #[error("objective became non-finite")]
    NonFinite,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Association(#[from] AssociationError),
}

/// Relative motion measured between consecutive keyframes.
#[derive(Debug, Clone, PartialEq)]
pub struct Odometry {
    /// Motion expressed in the frame of the previous keyframe.
    pub delta: Pose,
    pub sigma_position: f64,
    pub sigma_rotation: f64,
}

/// Detections of one keyframe plus its odometry link.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeBundle {
    pub index: usize,
    pub observations: Vec<Observation>,
    pub odometry: Option<Odometry>,
}

/// How expectation-step weights are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AssociationMode {
    /// Per-detection softmax with a new-landmark column.
    #[default]
    Factorized,
    /// Exact enumeration with landmarks used at most once per keyframe;
    /// only landmarks within reach of some detection are enumerated.
    Exact,
}

/// EM and Gauss-Newton settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    pub max_em_iterations: usize,
    pub max_gn_iterations: usize,
    /// Relative change of the EM objective below which iteration stops.
    pub convergence_tol: f64,
    pub gn_relative_tolerance: f64,
    pub gn_step_tolerance: f64,
    pub damping_initial: f64,
    pub damping_min: f64,
    pub damping_max: f64,
    /// Log-likelihood of the "new landmark" column; derived from the noise
    /// model and latent dimension when absent.
    pub new_landmark_log_likelihood: Option<f64>,
    /// Supplied alongside the config rather than inside it.
    #[serde(skip)]
    pub noise: NoiseConfig,
    pub association: AssociationMode,
    /// Expectation-step worker count.
    pub threads: usize,
    /// Weights below this are dropped from the maximization step.
    pub min_factor_weight: f64,
    pub spawn_null_weight: f64,
    pub spawn_objectness: f64,
    pub prune_weight_mass: f64,
    pub prune_grace_iterations: usize,
    /// Landmarks closer than this (meters) are candidates for fusion.
    pub merge_distance: f64,
    /// Squared latent distance below which landmarks may be fused; the
    /// latent dimension when absent.
    pub merge_latent_distance: Option<f64>,
    /// Orientation difference (radians) below which candidates are fused.
    pub merge_angle: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_em_iterations: 50,
            max_gn_iterations: 20,
            convergence_tol: 1e-6,
            gn_relative_tolerance: 1e-10,
            gn_step_tolerance: 1e-10,
            damping_initial: 1e-4,
            damping_min: 1e-12,
            damping_max: 1e12,
            new_landmark_log_likelihood: None,
            noise: NoiseConfig::default(),
            association: AssociationMode::Factorized,
            threads: 1,
            min_factor_weight: 1e-9,
            spawn_null_weight: 0.5,
            spawn_objectness: 0.5,
            prune_weight_mass: 0.5,
            prune_grace_iterations: 2,
            merge_distance: 1.0,
            merge_latent_distance: None,
            merge_angle: 0.3,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        self.noise.validate().map_err(BackendError::Config)?;
        if self.max_em_iterations == 0 || self.max_gn_iterations == 0 {
            return Err(BackendError::Config("iteration counts must be positive".into()));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(BackendError::Config("convergence_tol must be positive".into()));
        }
        if !(self.damping_min > 0.0 && self.damping_min <= self.damping_initial && self.damping_initial <= self.damping_max) {
            return Err(BackendError::Config("damping bounds must satisfy 0 < min <= initial <= max".into()));
        }
        if self.threads == 0 {
            return Err(BackendError::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    /// Log-likelihood assigned to the new-landmark hypothesis: the peak of
    /// a correct association, less the expected latent mismatch between two
    /// independent samples of a class (`D`), four of its standard
    /// deviations, and 20 nats for pose disagreement.
    pub fn null_log_likelihood(&self, latent_dim: usize) -> f64 {
        if let Some(v) = self.new_landmark_log_likelihood {
            return v;
        }
        let d = latent_dim as f64;
        let peak = 3.0 * scalar_gaussian_peak(self.noise.sigma_position)
            + 3.0 * scalar_gaussian_peak(self.noise.sigma_angle)
            + unit_gaussian_peak(latent_dim);
        peak - d - 4.0 * (2.0 * d).sqrt() - 20.0
    }
}

/// One row of the EM log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmLogEntry {
    pub iteration: usize,
    pub objective: f64,
    pub num_landmarks: usize,
    pub wall_ms: f64,
}

/// Conditions worth reporting; none of them abort the run.
#[derive(Debug, Clone, PartialEq)]
pub enum SolverFlag {
    /// The maximization step of this EM iteration hit its iteration cap.
    GaussNewtonNotConverged { iteration: usize },
    /// Some detections had every likelihood at the floor.
    DegenerateWeights { iteration: usize, keyframe: usize },
    /// EM stopped at its iteration cap.
    EmNotConverged,
}

/// Current estimate of trajectory and map.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MapState {
    pub trajectory: Vec<Pose>,
    pub landmarks: Vec<Landmark>,
    pub em_iterations: usize,
    pub gn_iterations: usize,
    pub objective: f64,
    pub log: Vec<EmLogEntry>,
    /// Objective sequences of every maximization step (see
    /// [`GaussNewtonReport::accepted_objectives`]).
    pub gn_traces: Vec<Vec<f64>>,
    pub flags: Vec<SolverFlag>,
    pub converged: bool,
    /// Landmarks created over the run, including pruned ones.
    pub spawned_total: usize,
    next_landmark_id: u64,
}

impl MapState {
    pub fn new(trajectory: Vec<Pose>, landmarks: Vec<Landmark>) -> Self {
        let next_landmark_id = landmarks.iter().map(|l| l.id + 1).max().unwrap_or(0);
        Self {
            trajectory,
            landmarks,
            next_landmark_id,
            ..Default::default()
        }
    }

    /// True when a maximization step failed to converge in the last EM
    /// iteration.
    pub fn has_failure(&self) -> bool {
        let last = self.em_iterations;
        self.flags
            .iter()
            .any(|f| matches!(f, SolverFlag::GaussNewtonNotConverged { iteration } if *iteration == last))
    }
}

/// Chains odometry from the identity pose.
pub fn odometry_trajectory(bundles: &[KeyframeBundle]) -> Result<Vec<Pose>, BackendError> {
    let mut out = Vec::with_capacity(bundles.len());
    let mut pose = Pose::identity();
    for (t, b) in bundles.iter().enumerate() {
        if t > 0 {
            let odo = b.odometry.as_ref().ok_or(BackendError::MissingOdometry(t))?;
            pose = pose.compose_delta(&odo.delta);
        }
        out.push(pose);
    }
    Ok(out)
}

fn latent_dim(bundles: &[KeyframeBundle]) -> Result<Option<usize>, BackendError> {
    let mut dim = None;
    for obs in bundles.iter().flat_map(|b| &b.observations) {
        match dim {
            None => dim = Some(obs.latent_dim()),
            Some(d) if d != obs.latent_dim() => {
                return Err(BackendError::LatentDimension {
                    expected: d,
                    actual: obs.latent_dim(),
                })
            }
            _ => {}
        }
    }
    Ok(dim)
}

fn likelihood_matrix(
    observations: &[Observation],
    landmarks: &[Landmark],
    observer: &Pose,
    noise: &NoiseConfig,
) -> Option<LikelihoodMatrix> {
    if observations.is_empty() || landmarks.is_empty() {
        return None;
    }
    let rows: Vec<Vec<f64>> = observations
        .iter()
        .map(|obs| {
            landmarks
                .iter()
                .map(|lm| observation_log_likelihood(obs, lm, observer, noise))
                .collect()
        })
        .collect();
    LikelihoodMatrix::from_rows(&rows).ok()
}

fn keyframe_weights(
    observations: &[Observation],
    landmarks: &[Landmark],
    observer: &Pose,
    cfg: &EmConfig,
    null: f64,
) -> Result<AssociationWeights, BackendError> {
    let k = observations.len();
    let m = landmarks.len();
    let Some(l) = likelihood_matrix(observations, landmarks, observer, &cfg.noise) else {
        let mut w = nalgebra::DMatrix::zeros(k, m + 1);
        w.column_mut(m).fill(1.0);
        return Ok(AssociationWeights {
            w,
            degenerate_rows: Vec::new(),
        });
    };
    match cfg.association {
        AssociationMode::Factorized => Ok(weights_with_null(&l, null)),
        AssociationMode::Exact => {
            // Landmarks that cannot compete with the new-landmark column for
            // any detection carry negligible weight and are left out.
            let reach = null - 50.0;
            let candidates: Vec<usize> = (0..m).filter(|&j| l.entries().column(j).max() > reach).collect();
            if k > EXACT_SIZE_LIMIT || candidates.len() > EXACT_SIZE_LIMIT {
                return Err(AssociationError::SizeGuard {
                    rows: k,
                    cols: candidates.len(),
                    limit: EXACT_SIZE_LIMIT,
                }
                .into());
            }
            let sub = LikelihoodMatrix::new(nalgebra::DMatrix::from_fn(k, candidates.len() + 1, |i, c| {
                if c < candidates.len() {
                    l.entries()[(i, candidates[c])]
                } else {
                    null
                }
            }))?;
            let exact = weights_exact(&sub, AssociationConstraint::OneToOneSharedLast)?;
            let mut w = nalgebra::DMatrix::zeros(k, m + 1);
            for i in 0..k {
                for (c, &j) in candidates.iter().enumerate() {
                    w[(i, j)] = exact.w[(i, c)];
                }
                w[(i, m)] = exact.w[(i, candidates.len())];
            }
            Ok(AssociationWeights {
                w,
                degenerate_rows: exact.degenerate_rows,
            })
        }
    }
}

/// Association weights for every keyframe: `K × (M + 1)` matrices whose last
/// column is the new-landmark hypothesis.
///
/// Keyframes are evaluated independently and collected in order, so the
/// result does not depend on `cfg.threads`.
pub fn expectation_step(
    state: &MapState,
    bundles: &[KeyframeBundle],
    cfg: &EmConfig,
) -> Result<Vec<AssociationWeights>, BackendError> {
    if state.trajectory.len() < bundles.len() {
        return Err(BackendError::Inconsistent(format!(
            "trajectory has {} poses for {} keyframes",
            state.trajectory.len(),
            bundles.len()
        )));
    }
    let dim = latent_dim(bundles)?.unwrap_or(crate::distributions::DEFAULT_LATENT_DIM);
    let null = cfg.null_log_likelihood(dim);
    let eval = |t: usize| keyframe_weights(&bundles[t].observations, &state.landmarks, &state.trajectory[t], cfg, null);
    if cfg.threads <= 1 {
        return (0..bundles.len()).map(eval).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| BackendError::Config(e.to_string()))?;
    pool.install(|| (0..bundles.len()).into_par_iter().map(eval).collect())
}

/// Sets each landmark latent mean to the weight-normalized mean of the
/// detection latents associated with it, and records its weight mass.
/// Landmarks with mass below `min_mass` keep their latent mean.
pub fn update_landmark_latents(
    state: &MapState,
    weights: &[AssociationWeights],
    bundles: &[KeyframeBundle],
    min_mass: f64,
) -> MapState {
    let mut out = state.clone();
    for (j, lm) in out.landmarks.iter_mut().enumerate() {
        let mut mass = 0.0;
        let mut sum = DVector::zeros(lm.latent_mean.len());
        for (bundle, w) in bundles.iter().zip(weights) {
            for (k, obs) in bundle.observations.iter().enumerate() {
                let wkj = w.w[(k, j)];
                if wkj > 0.0 {
                    mass += wkj;
                    sum.axpy(wkj, obs.shape_latent.mean(), 1.0);
                }
            }
        }
        lm.weight_mass = mass;
        if mass > min_mass {
            lm.latent_mean = sum / mass;
        }
    }
    out
}

/// Latent part of the maximization objective, `Σ w ½‖μ^sl − μ_j‖²` up to
/// constants.
pub fn latent_objective(state: &MapState, weights: &[AssociationWeights], bundles: &[KeyframeBundle]) -> f64 {
    let mut total = 0.0;
    for (bundle, w) in bundles.iter().zip(weights) {
        for (k, obs) in bundle.observations.iter().enumerate() {
            for (j, lm) in state.landmarks.iter().enumerate() {
                let wkj = w.w[(k, j)];
                if wkj > 0.0 {
                    total += 0.5 * wkj * (obs.shape_latent.mean() - &lm.latent_mean).norm_squared();
                }
            }
        }
    }
    total
}

/// Full maximization objective: geometry plus latent terms.
pub fn em_objective(state: &MapState, weights: &[AssociationWeights], bundles: &[KeyframeBundle], cfg: &EmConfig) -> f64 {
    pose_objective(state, weights, bundles, cfg) + latent_objective(state, weights, bundles)
}

/// Counts of landmarks created and removed by [`spawn_and_prune_landmarks`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LifecycleChanges {
    pub spawned: usize,
    pub pruned: usize,
    pub merged: usize,
}

impl LifecycleChanges {
    pub fn any(&self) -> bool {
        self.spawned > 0 || self.pruned > 0 || self.merged > 0
    }
}

/// Fuses duplicate landmarks.
///
/// Duplicates arise when an object is first seen from poses displaced by
/// odometry drift; soft association then splits its detections between the
/// copies, so neither gets pruned. Two landmarks are taken to be one object
/// when they are within `merge_distance`, their latent means are compatible
/// and their orientations agree within `merge_angle`. Distinct nearby
/// objects of one class almost never share an orientation that closely.
/// The survivor is the mass-weighted average and keeps the older id.
pub fn merge_duplicate_landmarks(landmarks: &mut Vec<Landmark>, cfg: &EmConfig) -> usize {
    let Some(dim) = landmarks.first().map(|l| l.latent_mean.len()) else { return 0 };
    let latent_limit = cfg.merge_latent_distance.unwrap_or(dim as f64);
    let mut merged = 0;
    let mut i = 0;
    while i < landmarks.len() {
        let mut j = i + 1;
        while j < landmarks.len() {
            let (a, b) = (&landmarks[i], &landmarks[j]);
            let angle = euler_to_rotation(&a.orientation)
                .transpose()
                .compose(&euler_to_rotation(&b.orientation))
                .angle();
            if (a.position - b.position).norm() >= cfg.merge_distance
                || (&a.latent_mean - &b.latent_mean).norm_squared() >= latent_limit
                || angle >= cfg.merge_angle
            {
                j += 1;
                continue;
            }
            let b = landmarks.remove(j);
            let a = &mut landmarks[i];
            let (wa, wb) = (a.weight_mass.max(1e-12), b.weight_mass.max(1e-12));
            let s = wa + wb;
            a.position = (a.position * wa + b.position * wb) / s;
            a.latent_mean = (&a.latent_mean * wa + &b.latent_mean * wb) / s;
            if wb > wa {
                a.orientation = b.orientation;
            }
            if b.id < a.id {
                a.id = b.id;
                a.born_iteration = b.born_iteration;
            }
            a.weight_mass = s;
            merged += 1;
        }
        i += 1;
    }
    merged
}

fn landmark_from_detection(obs: &Observation, observer: &Pose, id: u64, iteration: usize) -> Landmark {
    let local = obs.decoded_orientation().unwrap_or_default();
    Landmark {
        id,
        latent_mean: obs.shape_latent.mean().clone(),
        position: transform_to_world_frame(&obs.position, observer),
        orientation: global_orientation(&local, &observer.orientation),
        weight_mass: 0.0,
        born_iteration: iteration,
    }
}

/// Creates landmarks for confident detections that no existing landmark
/// explains, removes landmarks that collected too little weight after
/// their grace window, and fuses duplicates.
///
/// Candidates are processed in keyframe order and re-scored against
/// landmarks created earlier in the same pass, so repeated sightings of one
/// new object yield one landmark.
pub fn spawn_and_prune_landmarks(
    state: &MapState,
    weights: &[AssociationWeights],
    bundles: &[KeyframeBundle],
    cfg: &EmConfig,
    iteration: usize,
) -> (MapState, LifecycleChanges) {
    let mut out = state.clone();
    let mut changes = LifecycleChanges::default();
    let m = state.landmarks.len();
    let dim = latent_dim(bundles).ok().flatten().unwrap_or(crate::distributions::DEFAULT_LATENT_DIM);
    let null = cfg.null_log_likelihood(dim);

    for (t, (bundle, w)) in bundles.iter().zip(weights).enumerate() {
        let observer = out.trajectory[t];
        for (k, obs) in bundle.observations.iter().enumerate() {
            if w.w[(k, m)] <= cfg.spawn_null_weight || obs.objectness <= cfg.spawn_objectness {
                continue;
            }
            let new_landmarks = &out.landmarks[m..];
            if !new_landmarks.is_empty() {
                // Compare against the full row so the null weight reflects
                // both the original and the freshly created landmarks.
                let row: Vec<f64> = out
                    .landmarks
                    .iter()
                    .map(|lm| observation_log_likelihood(obs, lm, &observer, &cfg.noise))
                    .collect();
                let l = LikelihoodMatrix::from_rows(&[row]).expect("non-empty row");
                let wn = weights_with_null(&l, null);
                if wn.w[(0, out.landmarks.len())] <= cfg.spawn_null_weight {
                    continue;
                }
            }
            let id = out.next_landmark_id;
            out.next_landmark_id += 1;
            let mut lm = landmark_from_detection(obs, &observer, id, iteration);
            lm.weight_mass = w.w[(k, m)];
            out.landmarks.push(lm);
            changes.spawned += 1;
        }
    }

    let before = out.landmarks.len();
    out.landmarks.retain(|lm| {
        iteration < lm.born_iteration + cfg.prune_grace_iterations || lm.weight_mass >= cfg.prune_weight_mass
    });
    changes.pruned = before - out.landmarks.len();
    changes.merged = merge_duplicate_landmarks(&mut out.landmarks, cfg);
    out.spawned_total += changes.spawned;
    (out, changes)
}

/// Validates bundles and returns the odometry-chained initial state.
pub fn initial_state(bundles: &[KeyframeBundle]) -> Result<MapState, BackendError> {
    if bundles.is_empty() {
        return Err(BackendError::NoKeyframes);
    }
    latent_dim(bundles)?;
    Ok(MapState::new(odometry_trajectory(bundles)?, Vec::new()))
}

/// Full EM loop from the odometry-chained trajectory and an empty map.
pub fn run_em(bundles: &[KeyframeBundle], cfg: &EmConfig) -> Result<MapState, BackendError> {
    cfg.validate()?;
    let state = initial_state(bundles)?;
    run_em_from(state, bundles, cfg)
}

/// EM loop starting from an existing state. Iteration 0 builds the initial
/// map (when the state's map is empty) and logs the starting objective.
pub fn run_em_from(mut state: MapState, bundles: &[KeyframeBundle], cfg: &EmConfig) -> Result<MapState, BackendError> {
    cfg.validate()?;
    if bundles.is_empty() {
        return Err(BackendError::NoKeyframes);
    }
    let start = Instant::now();
    let elapsed_ms = |s: &Instant| s.elapsed().as_secs_f64() * 1e3;

    let base_iteration = state.em_iterations;
    let mut weights = expectation_step(&state, bundles, cfg)?;
    if state.landmarks.is_empty() {
        let (spawned, _) = spawn_and_prune_landmarks(&state, &weights, bundles, cfg, base_iteration);
        state = spawned;
        weights = expectation_step(&state, bundles, cfg)?;
    }
    let mut previous = em_objective(&state, &weights, bundles, cfg);
    state.objective = previous;
    state.log.push(EmLogEntry {
        iteration: base_iteration,
        objective: previous,
        num_landmarks: state.landmarks.len(),
        wall_ms: elapsed_ms(&start),
    });

    state.converged = false;
    for step in 1..=cfg.max_em_iterations {
        let iteration = base_iteration + step;
        if step > 1 {
            weights = expectation_step(&state, bundles, cfg)?;
        }
        for (t, w) in weights.iter().enumerate() {
            if w.is_degenerate() {
                state.flags.push(SolverFlag::DegenerateWeights { iteration, keyframe: t });
            }
        }
        let (optimized, report) = maximize_poses(&state, &weights, bundles, cfg)?;
        state = update_landmark_latents(&optimized, &weights, bundles, cfg.min_factor_weight);
        state.gn_traces.push(report.accepted_objectives.clone());
        if !report.converged {
            state.flags.push(SolverFlag::GaussNewtonNotConverged { iteration });
        }
        let objective = em_objective(&state, &weights, bundles, cfg);
        if !objective.is_finite() {
            return Err(BackendError::NonFinite);
        }
        let (next, changes) = spawn_and_prune_landmarks(&state, &weights, bundles, cfg, iteration);
        state = next;
        state.em_iterations = iteration;
        state.objective = objective;
        state.log.push(EmLogEntry {
            iteration,
            objective,
            num_landmarks: state.landmarks.len(),
            wall_ms: elapsed_ms(&start),
        });
        let change = (previous - objective).abs() / previous.abs().max(1e-12);
        previous = objective;
        if !changes.any() && change < cfg.convergence_tol {
            state.converged = true;
            break;
        }
    }
    if !state.converged {
        state.flags.push(SolverFlag::EmNotConverged);
    }
    Ok(state)
}

/// Orientation that [`landmark_from_detection`] assigns when a detection's
/// angles cannot be decoded.
pub fn default_orientation() -> EulerAngles {
    EulerAngles::zero()
}

/// Latent objective of a single landmark mean for a set of weighted
/// samples; exposed for tests of the closed-form update.
pub fn weighted_latent_cost(mean: &DVector<f64>, samples: &[(f64, DVector<f64>)]) -> f64 {
    samples
        .iter()
        .map(|(w, z)| -w * unit_gaussian_log_pdf(z, mean))
        .sum()
}
