//! Damped Gauss-Newton over observer poses and landmark positions and
//! orientations.

use nalgebra::Vector3;

use super::factors::{observation_factor, odometry_factor, params_to_pose, pose_to_params, Linearization, ParamBlock};
use super::linear::NormalEquations;
use super::{BackendError, EmConfig, KeyframeBundle, MapState};
use crate::association::AssociationWeights;
use crate::geometry::EulerAngles;

/// Outcome of one maximization step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussNewtonReport {
    /// Objective before the first step followed by the objective after every
    /// accepted step.
    pub accepted_objectives: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Infinity norm of the last accepted update.
    pub last_update_norm: f64,
}

/// One weighted detection term.
#[derive(Debug, Clone)]
struct ObservationTerm {
    keyframe: usize,
    landmark: usize,
    weight: f64,
    position: Vector3<f64>,
    orientation: Option<EulerAngles>,
}

struct Problem<'a> {
    terms: Vec<ObservationTerm>,
    bundles: &'a [KeyframeBundle],
    /// Map landmark index → optimization block, `None` when inactive.
    landmark_block: Vec<Option<usize>>,
    active_landmarks: Vec<usize>,
    sigma_position: f64,
    sigma_angle: f64,
}

#[derive(Debug, Clone)]
struct Params {
    poses: Vec<ParamBlock>,
    landmarks: Vec<ParamBlock>,
}

impl<'a> Problem<'a> {
    fn new(state: &MapState, weights: &[AssociationWeights], bundles: &'a [KeyframeBundle], cfg: &EmConfig) -> Self {
        let m = state.landmarks.len();
        let mut terms = Vec::new();
        let mut mass = vec![0.0; m];
        for (t, (bundle, w)) in bundles.iter().zip(weights).enumerate() {
            for (k, obs) in bundle.observations.iter().enumerate() {
                let orientation = obs.decoded_orientation().ok();
                for (j, mass_j) in mass.iter_mut().enumerate() {
                    let weight = w.w[(k, j)];
                    if weight >= cfg.min_factor_weight {
                        *mass_j += weight;
                        terms.push(ObservationTerm {
                            keyframe: t,
                            landmark: j,
                            weight,
                            position: obs.position,
                            orientation,
                        });
                    }
                }
            }
        }
        let mut landmark_block = vec![None; m];
        let mut active_landmarks = Vec::new();
        for (j, &mj) in mass.iter().enumerate() {
            if mj >= cfg.min_factor_weight {
                landmark_block[j] = Some(active_landmarks.len());
                active_landmarks.push(j);
            }
        }
        terms.retain(|term| landmark_block[term.landmark].is_some());
        Self {
            terms,
            bundles,
            landmark_block,
            active_landmarks,
            sigma_position: cfg.noise.sigma_position,
            sigma_angle: cfg.noise.sigma_angle,
        }
    }

    fn params(&self, state: &MapState) -> Params {
        Params {
            poses: state.trajectory.iter().map(pose_to_params).collect(),
            landmarks: state
                .landmarks
                .iter()
                .map(|lm| pose_to_params(&crate::geometry::Pose::new(lm.position, lm.orientation)))
                .collect(),
        }
    }

    fn observation(&self, term: &ObservationTerm, p: &Params) -> Linearization {
        observation_factor(
            &p.poses[term.keyframe],
            &p.landmarks[term.landmark],
            &term.position,
            term.orientation.as_ref(),
            self.sigma_position,
            self.sigma_angle,
        )
    }

    fn odometry(&self, t: usize, p: &Params) -> Option<Linearization> {
        let odo = self.bundles[t].odometry.as_ref()?;
        Some(odometry_factor(
            &p.poses[t - 1],
            &p.poses[t],
            &odo.delta,
            odo.sigma_position,
            odo.sigma_rotation,
        ))
    }

    fn objective(&self, p: &Params) -> f64 {
        let obs: f64 = self
            .terms
            .iter()
            .map(|term| 0.5 * term.weight * self.observation(term, p).squared_norm())
            .sum();
        let odo: f64 = (1..p.poses.len())
            .filter_map(|t| self.odometry(t, p))
            .map(|lin| 0.5 * lin.squared_norm())
            .sum();
        obs + odo
    }

    fn normal_equations(&self, p: &Params) -> NormalEquations {
        let np = p.poses.len().saturating_sub(1);
        let mut eq = NormalEquations::new(np, self.active_landmarks.len());
        for term in &self.terms {
            let lin = self.observation(term, p);
            let w = term.weight;
            let jl = &lin.jac_second;
            let l = self.landmark_block[term.landmark].expect("inactive landmarks are filtered");
            eq.landmark_diag[l] += w * jl.transpose() * jl;
            eq.landmark_gradient[l] += w * jl.transpose() * lin.residual;
            if term.keyframe > 0 {
                let i = term.keyframe - 1;
                let jp = &lin.jac_first;
                eq.pose_diag[i] += w * jp.transpose() * jp;
                eq.pose_gradient[i] += w * jp.transpose() * lin.residual;
                let mut c = eq.pose_landmark.fixed_view_mut::<6, 6>(6 * i, 6 * l);
                c += w * jp.transpose() * jl;
            }
        }
        for t in 1..p.poses.len() {
            let Some(lin) = self.odometry(t, p) else { continue };
            let b = t - 1;
            let jb = &lin.jac_second;
            eq.pose_diag[b] += jb.transpose() * jb;
            eq.pose_gradient[b] += jb.transpose() * lin.residual;
            if t >= 2 {
                let a = t - 2;
                let ja = &lin.jac_first;
                eq.pose_diag[a] += ja.transpose() * ja;
                eq.pose_gradient[a] += ja.transpose() * lin.residual;
                eq.pose_upper[a] += ja.transpose() * jb;
            }
        }
        eq
    }

    fn apply(&self, p: &Params, dp: &[ParamBlock], dl: &[ParamBlock]) -> Params {
        let mut out = p.clone();
        for (i, d) in dp.iter().enumerate() {
            out.poses[i + 1] += d;
        }
        for (l, d) in dl.iter().enumerate() {
            out.landmarks[self.active_landmarks[l]] += d;
        }
        out
    }

    fn write_back(&self, p: &Params, state: &mut MapState) {
        for (pose, block) in state.trajectory.iter_mut().zip(&p.poses) {
            *pose = params_to_pose(block);
        }
        for (lm, block) in state.landmarks.iter_mut().zip(&p.landmarks) {
            let pose = params_to_pose(block);
            lm.position = pose.position;
            lm.orientation = pose.orientation;
        }
    }
}

/// Maximization-step objective (pose and geometry part): weighted whitened
/// detection residuals plus odometry residuals, with constants dropped.
pub fn pose_objective(state: &MapState, weights: &[AssociationWeights], bundles: &[KeyframeBundle], cfg: &EmConfig) -> f64 {
    let problem = Problem::new(state, weights, bundles, cfg);
    problem.objective(&problem.params(state))
}

/// Runs damped Gauss-Newton (Levenberg-Marquardt) on all poses but the
/// first and on every landmark carrying association weight. Steps are only
/// accepted when they lower the objective.
pub fn maximize_poses(
    state: &MapState,
    weights: &[AssociationWeights],
    bundles: &[KeyframeBundle],
    cfg: &EmConfig,
) -> Result<(MapState, GaussNewtonReport), BackendError> {
    if weights.len() != bundles.len() || state.trajectory.len() != bundles.len() {
        return Err(BackendError::Inconsistent(format!(
            "{} poses, {} weight matrices, {} keyframes",
            state.trajectory.len(),
            weights.len(),
            bundles.len()
        )));
    }
    let problem = Problem::new(state, weights, bundles, cfg);
    let mut params = problem.params(state);
    let mut cost = problem.objective(&params);
    if !cost.is_finite() {
        return Err(BackendError::NonFinite);
    }
    let mut report = GaussNewtonReport {
        accepted_objectives: vec![cost],
        ..Default::default()
    };
    let mut lambda = cfg.damping_initial;
    let mut eq = problem.normal_equations(&params);
    let gradient = eq
        .pose_gradient
        .iter()
        .chain(&eq.landmark_gradient)
        .map(|g| g.amax())
        .fold(0.0, f64::max);
    if cost == 0.0 || gradient < 1e-12 {
        report.converged = true;
        return Ok((state.clone(), report));
    }

    while report.iterations < cfg.max_gn_iterations {
        report.iterations += 1;
        let step = eq.damped(lambda, 1e-9).solve();
        let Ok((dp, dl)) = step else {
            lambda *= 10.0;
            if lambda > cfg.damping_max {
                break;
            }
            continue;
        };
        let candidate = problem.apply(&params, &dp, &dl);
        let new_cost = problem.objective(&candidate);
        if new_cost.is_finite() && new_cost < cost {
            let norm = dp.iter().chain(dl.iter()).map(|d| d.amax()).fold(0.0, f64::max);
            let decrease = cost - new_cost;
            params = candidate;
            cost = new_cost;
            report.accepted_objectives.push(cost);
            report.last_update_norm = norm;
            lambda = (lambda * 0.1).max(cfg.damping_min);
            if decrease <= cfg.gn_relative_tolerance * cost.max(f64::MIN_POSITIVE) || norm < cfg.gn_step_tolerance {
                report.converged = true;
                break;
            }
            eq = problem.normal_equations(&params);
        } else {
            lambda *= 10.0;
            if lambda > cfg.damping_max {
                // No descent direction left at any damping: a stationary point.
                report.converged = true;
                break;
            }
        }
    }
    let mut out = state.clone();
    problem.write_back(&params, &mut out);
    out.gn_iterations += report.iterations;
    Ok((out, report))
}
