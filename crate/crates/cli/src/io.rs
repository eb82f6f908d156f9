//! On-disk formats: JSON configs, JSON-lines record streams, plain-text
//! trajectories and CSV tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use latent_slam::backend::{EmLogEntry, KeyframeBundle, Odometry, SolverFlag};
use latent_slam::distributions::{ClassId, ClassPriorTable};
use latent_slam::geometry::{EulerAngles, Pose};
use latent_slam::observation::{Landmark, NoiseConfig, Observation};
use latent_slam::simulator::{GroundTruth, ObservationLabel, TrueLandmark, WorldSpec};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Parses a JSON document, naming the offending key on failure.
pub fn parse_json<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        anyhow::anyhow!("{origin}: at `{path}`: {inner}")
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_json(&text, &path.display().to_string())
}

/// Parses JSON lines; blank lines are skipped and errors carry the line
/// number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_json(l, &format!("{} line {}", path.display(), i + 1)))
        .collect()
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// `world.json`: the generating spec, noise levels and class centers.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldFile {
    pub spec: WorldSpec,
    pub noise: NoiseConfig,
    pub class_prior: ClassPriorTable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OdometryRecord {
    position: [f64; 3],
    orientation: EulerAngles,
    sigma_position: f64,
    sigma_rotation: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleRecord {
    t: usize,
    odometry: Option<OdometryRecord>,
    observations: Vec<Observation>,
}

pub fn bundles_to_jsonl(bundles: &[KeyframeBundle]) -> Result<String> {
    let records: Vec<BundleRecord> = bundles
        .iter()
        .map(|b| BundleRecord {
            t: b.index,
            odometry: b.odometry.as_ref().map(|o| OdometryRecord {
                position: o.delta.position.into(),
                orientation: o.delta.orientation,
                sigma_position: o.sigma_position,
                sigma_rotation: o.sigma_rotation,
            }),
            observations: b.observations.clone(),
        })
        .collect();
    to_jsonl(&records)
}

/// Reads `bundles.jsonl`; keyframes must be listed in order from 0.
pub fn read_bundles(path: &Path) -> Result<Vec<KeyframeBundle>> {
    let records: Vec<BundleRecord> = read_jsonl(path)?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            if r.t != i {
                bail!("{}: keyframe {} found where {} was expected", path.display(), r.t, i);
            }
            let odometry = r
                .odometry
                .map(|o| -> Result<Odometry> {
                    if !(o.sigma_position > 0.0 && o.sigma_rotation > 0.0) {
                        bail!("{}: keyframe {i}: odometry sigmas must be positive", path.display());
                    }
                    Ok(Odometry {
                        delta: Pose::new(Vector3::from(o.position), o.orientation),
                        sigma_position: o.sigma_position,
                        sigma_rotation: o.sigma_rotation,
                    })
                })
                .transpose()?;
            Ok(KeyframeBundle {
                index: r.t,
                observations: r.observations,
                odometry,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum GroundTruthRecord {
    Pose {
        t: usize,
        position: [f64; 3],
        orientation: EulerAngles,
    },
    Landmark {
        id: u64,
        class: ClassId,
        position: [f64; 3],
        orientation: EulerAngles,
    },
    Labels {
        t: usize,
        labels: Vec<ObservationLabel>,
    },
}

pub fn ground_truth_to_jsonl(gt: &GroundTruth) -> Result<String> {
    let mut records = Vec::new();
    for (t, p) in gt.trajectory.iter().enumerate() {
        records.push(GroundTruthRecord::Pose {
            t,
            position: p.position.into(),
            orientation: p.orientation,
        });
    }
    for l in &gt.landmarks {
        records.push(GroundTruthRecord::Landmark {
            id: l.id,
            class: l.class,
            position: l.position.into(),
            orientation: l.orientation,
        });
    }
    for (t, labels) in gt.labels.iter().enumerate() {
        records.push(GroundTruthRecord::Labels {
            t,
            labels: labels.clone(),
        });
    }
    to_jsonl(&records)
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    let mut gt = GroundTruth::default();
    for record in read_jsonl::<GroundTruthRecord>(path)? {
        match record {
            GroundTruthRecord::Pose { t, position, orientation } => {
                if t != gt.trajectory.len() {
                    bail!("{}: pose {t} out of order", path.display());
                }
                gt.trajectory.push(Pose::new(Vector3::from(position), orientation));
            }
            GroundTruthRecord::Landmark {
                id,
                class,
                position,
                orientation,
            } => gt.landmarks.push(TrueLandmark {
                id,
                class,
                position: Vector3::from(position),
                orientation,
            }),
            GroundTruthRecord::Labels { t, labels } => {
                if t != gt.labels.len() {
                    bail!("{}: labels for keyframe {t} out of order", path.display());
                }
                gt.labels.push(labels);
            }
        }
    }
    Ok(gt)
}

/// Formats with nine significant digits, in positional notation.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (8 - magnitude).max(0) as usize;
    let s = format!("{x:.decimals$}");
    // Rounding can carry into a new leading digit (9.99999999 → 10.0000000).
    if s.trim_start_matches('-').replace('.', "").trim_start_matches('0').len() > 9 && decimals > 0 {
        let decimals = decimals - 1;
        return format!("{x:.decimals$}");
    }
    s
}

/// Trajectory file: `t tx ty tz qx qy qz qw` per line, frame-to-world
/// quaternions.
pub fn trajectory_to_text(poses: &[Pose]) -> String {
    let mut out = String::new();
    for (t, p) in poses.iter().enumerate() {
        let q = p.quaternion();
        let v = [
            p.position.x,
            p.position.y,
            p.position.z,
            q.i,
            q.j,
            q.k,
            q.w,
        ];
        write!(out, "{t}").expect("writing to a String");
        for c in v {
            write!(out, " {}", format_sig9(c)).expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

pub fn read_trajectory(path: &Path) -> Result<Vec<Pose>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .with_context(|| format!("{} line {}: non-numeric field", path.display(), i + 1))?;
        if fields.len() != 8 {
            bail!("{} line {}: expected 8 fields, found {}", path.display(), i + 1, fields.len());
        }
        let q = UnitQuaternion::from_quaternion(Quaternion::new(fields[7], fields[4], fields[5], fields[6]));
        poses.push(Pose::from_position_quaternion(Vector3::new(fields[1], fields[2], fields[3]), &q));
    }
    Ok(poses)
}

pub fn read_landmarks(path: &Path) -> Result<Vec<Landmark>> {
    read_jsonl(path)
}

/// `em_log.csv`. Solver flags follow the table as `#` comment lines.
pub fn em_log_to_csv(log: &[EmLogEntry], flags: &[SolverFlag]) -> String {
    let mut out = String::from("iter,objective,num_landmarks,wall_ms\n");
    for e in log {
        writeln!(out, "{},{:.12e},{},{:.3}", e.iteration, e.objective, e.num_landmarks, e.wall_ms).expect("writing to a String");
    }
    for f in flags {
        writeln!(out, "# flag: {f:?}").expect("writing to a String");
    }
    out
}
