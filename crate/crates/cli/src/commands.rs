//! The `simulate`, `slam` and `eval` commands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use latent_slam::backend::{odometry_trajectory, run_em, AssociationMode, EmConfig, MapState};
use latent_slam::evaluation::{
    ate_with, classification_accuracy, rpe, viewpoint_metrics, Alignment, TrajectoryPair, ViewpointEvalSet,
};
use latent_slam::geometry::euler_to_rotation;
use latent_slam::observation::{mle_label, NoiseConfig};
use latent_slam::simulator::{simulate, GroundTruth, WorldSpec};
use serde::{Deserialize, Serialize};

use crate::io;

/// Everything a run needs, read from one JSON file. Missing sections take
/// their defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldSpec,
    pub noise: NoiseConfig,
    pub em: EmConfig,
    pub output_dir: Option<PathBuf>,
}

/// Command-line overrides shared by the commands.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub assoc: Option<AssociationMode>,
    pub dim: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg: RunConfig = match path {
            Some(p) => io::read_json(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = overrides.seed {
            cfg.world.seed = seed;
        }
        if let Some(threads) = overrides.threads {
            cfg.em.threads = threads;
        }
        if let Some(assoc) = overrides.assoc {
            cfg.em.association = assoc;
        }
        if let Some(dim) = overrides.dim {
            cfg.world.latent_dim = dim;
        }
        // One noise model drives both the simulator and the solver.
        cfg.em.noise = cfg.noise;
        Ok(cfg)
    }

    pub fn output_dir(&self, flag: Option<&Path>) -> Result<PathBuf> {
        let dir = flag
            .map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .context("no output directory: pass --out or set output_dir")?;
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }
}

pub const WORLD_FILE: &str = "world.json";
pub const BUNDLES_FILE: &str = "bundles.jsonl";
pub const GROUND_TRUTH_FILE: &str = "groundtruth.jsonl";
pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const ODOMETRY_FILE: &str = "odometry.txt";
pub const LANDMARKS_FILE: &str = "landmarks.jsonl";
pub const EM_LOG_FILE: &str = "em_log.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const TRAJECTORIES_CSV: &str = "trajectories.csv";

/// Writes `world.json`, `bundles.jsonl` and `groundtruth.jsonl`.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.noise.validate().map_err(anyhow::Error::msg)?;
    let sim = simulate(&cfg.world, &cfg.noise)?;
    let world = io::WorldFile {
        spec: cfg.world.clone(),
        noise: cfg.noise,
        class_prior: sim.table,
    };
    io::write_file(&out.join(WORLD_FILE), &(serde_json::to_string_pretty(&world)? + "\n"))?;
    io::write_file(&out.join(BUNDLES_FILE), &io::bundles_to_jsonl(&sim.bundles)?)?;
    io::write_file(&out.join(GROUND_TRUTH_FILE), &io::ground_truth_to_jsonl(&sim.ground_truth)?)?;
    Ok(())
}

/// Outcome of [`cmd_slam`].
#[derive(Debug, Clone)]
pub struct SlamSummary {
    pub state: MapState,
    pub wall_ms: f64,
    /// A maximization step failed to converge in the final EM iteration.
    pub failed: bool,
}

/// Runs EM SLAM on `bundles` and writes the trajectory, the odometry-only
/// trajectory, the landmarks and the EM log.
pub fn cmd_slam(bundles_path: &Path, cfg: &RunConfig, expected_dim: Option<usize>, out: &Path) -> Result<SlamSummary> {
    let bundles = io::read_bundles(bundles_path)?;
    ensure!(!bundles.is_empty(), "{}: no keyframes", bundles_path.display());
    if let Some(dim) = expected_dim {
        if let Some(obs) = bundles.iter().flat_map(|b| &b.observations).next() {
            ensure!(
                obs.latent_dim() == dim,
                "--dim {dim} requested but {} holds {}-dimensional latents",
                bundles_path.display(),
                obs.latent_dim()
            );
        }
    }
    let start = Instant::now();
    let state = run_em(&bundles, &cfg.em)?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;

    io::write_file(&out.join(TRAJECTORY_FILE), &io::trajectory_to_text(&state.trajectory))?;
    io::write_file(&out.join(ODOMETRY_FILE), &io::trajectory_to_text(&odometry_trajectory(&bundles)?))?;
    io::write_file(&out.join(LANDMARKS_FILE), &io::to_jsonl(&state.landmarks)?)?;
    io::write_file(&out.join(EM_LOG_FILE), &io::em_log_to_csv(&state.log, &state.flags))?;
    let failed = state.has_failure();
    Ok(SlamSummary { state, wall_ms, failed })
}

/// Metrics written by [`cmd_eval`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ate_m: f64,
    pub rpe_m: f64,
    pub class_acc: f64,
    pub acc_pi6: f64,
    pub mederr_deg: f64,
}

impl Metrics {
    pub fn csv(&self) -> String {
        format!(
            "ate_m,rpe_m,class_acc,acc_pi6,mederr_deg\n{},{},{},{},{}\n",
            self.ate_m, self.rpe_m, self.class_acc, self.acc_pi6, self.mederr_deg
        )
    }
}

pub struct EvalInputs<'a> {
    pub trajectory: &'a Path,
    pub ground_truth: &'a Path,
    pub landmarks: &'a Path,
    pub world: &'a Path,
}

/// Compares an estimate against ground truth. Each estimated landmark is
/// matched to the nearest true landmark after trajectory alignment; its MLE
/// class and aligned orientation are scored against that landmark.
pub fn cmd_eval(inputs: &EvalInputs, out: &Path) -> Result<Metrics> {
    let estimated = io::read_trajectory(inputs.trajectory)?;
    let gt = io::read_ground_truth(inputs.ground_truth)?;
    let landmarks = io::read_landmarks(inputs.landmarks)?;
    let world: io::WorldFile = io::read_json(inputs.world)?;

    if estimated.len() != gt.trajectory.len() {
        bail!(
            "trajectory has {} poses but ground truth has {}",
            estimated.len(),
            gt.trajectory.len()
        );
    }
    let pair = TrajectoryPair::new(estimated, gt.trajectory.clone())?;
    let ate = ate_with(&pair, false);
    let rpe = rpe(&pair, 1)?;

    let (class_acc, acc_pi6, mederr_deg) = score_landmarks(&landmarks, &gt, &world, &ate.alignment)?;
    let metrics = Metrics {
        ate_m: ate.rmse,
        rpe_m: rpe,
        class_acc,
        acc_pi6,
        mederr_deg,
    };
    io::write_file(&out.join(METRICS_JSON), &(serde_json::to_string_pretty(&metrics)? + "\n"))?;
    io::write_file(&out.join(METRICS_CSV), &metrics.csv())?;
    io::write_file(&out.join(TRAJECTORIES_CSV), &trajectories_csv(&pair, &ate.alignment))?;
    Ok(metrics)
}

fn score_landmarks(
    landmarks: &[latent_slam::observation::Landmark],
    gt: &GroundTruth,
    world: &io::WorldFile,
    alignment: &Alignment,
) -> Result<(f64, f64, f64)> {
    if landmarks.is_empty() || gt.landmarks.is_empty() {
        // Nothing to score.
        return Ok((f64::NAN, f64::NAN, f64::NAN));
    }
    let mut predicted = Vec::new();
    let mut truth = Vec::new();
    let mut rotations = Vec::new();
    for lm in landmarks {
        let p = alignment.apply_point(&lm.position);
        let nearest = gt
            .landmarks
            .iter()
            .min_by(|a, b| (a.position - p).norm().total_cmp(&(b.position - p).norm()))
            .expect("non-empty");
        predicted.push(mle_label(&lm.latent_mean, &world.class_prior)?);
        truth.push(nearest.class);
        let est = alignment.apply_orientation(&euler_to_rotation(&lm.orientation));
        rotations.push((est, euler_to_rotation(&nearest.orientation)));
    }
    let class_acc = classification_accuracy(&predicted, &truth)?;
    let vp = viewpoint_metrics(&ViewpointEvalSet::new(rotations)?);
    Ok((class_acc, vp.acc_pi_over_6, vp.med_err_deg))
}

fn trajectories_csv(pair: &TrajectoryPair, alignment: &Alignment) -> String {
    let mut out = String::from("t,est_x,est_y,est_z,ref_x,ref_y,ref_z\n");
    for (t, (e, r)) in pair.estimated().iter().zip(pair.reference()).enumerate() {
        let a = alignment.apply_point(&e.position);
        out.push_str(&format!(
            "{t},{},{},{},{},{},{}\n",
            a.x, a.y, a.z, r.position.x, r.position.y, r.position.z
        ));
    }
    out
}
