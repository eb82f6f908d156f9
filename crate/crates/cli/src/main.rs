use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use latent_slam::backend::AssociationMode;
use latent_slam_cli::commands::{
    cmd_eval, cmd_simulate, cmd_slam, EvalInputs, Overrides, RunConfig, BUNDLES_FILE, GROUND_TRUTH_FILE, LANDMARKS_FILE,
    TRAJECTORY_FILE, WORLD_FILE,
};

#[derive(Parser)]
#[command(name = "latent-slam", version, about = "Object-level EM SLAM with learned shape latents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Assoc {
    Factorized,
    Exact,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the world seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Expectation-step worker threads.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum)]
    assoc: Option<Assoc>,
    /// Shape latent dimension.
    #[arg(long, value_parser = ["16", "128"])]
    dim: Option<String>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            threads: self.threads,
            assoc: self.assoc.map(|a| match a {
                Assoc::Factorized => AssociationMode::Factorized,
                Assoc::Exact => AssociationMode::Exact,
            }),
            dim: self.dim.as_deref().map(|d| d.parse().expect("restricted by the parser")),
        }
    }

    fn load(&self) -> Result<(RunConfig, PathBuf)> {
        let cfg = RunConfig::load(self.config.as_deref(), &self.overrides())?;
        let out = cfg.output_dir(self.out.as_deref())?;
        Ok((cfg, out))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate world.json, bundles.jsonl and groundtruth.jsonl.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Run EM SLAM on a bundle file.
    Slam {
        /// Defaults to bundles.jsonl in the output directory.
        #[arg(long)]
        bundles: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a SLAM run against ground truth.
    Eval {
        #[arg(long)]
        trajectory: Option<PathBuf>,
        #[arg(long)]
        groundtruth: Option<PathBuf>,
        #[arg(long)]
        landmarks: Option<PathBuf>,
        #[arg(long)]
        world: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate { common } => {
            let (cfg, out) = common.load()?;
            cmd_simulate(&cfg, &out)?;
            eprintln!("wrote world to {}", out.display());
        }
        Command::Slam { bundles, common } => {
            let (cfg, out) = common.load()?;
            let bundles = bundles.unwrap_or_else(|| out.join(BUNDLES_FILE));
            let dim = common.overrides().dim;
            let summary = cmd_slam(&bundles, &cfg, dim, &out)?;
            let s = &summary.state;
            eprintln!(
                "{} EM iterations, {} landmarks, objective {:.6e}, {:.1} ms",
                s.em_iterations,
                s.landmarks.len(),
                s.objective,
                summary.wall_ms
            );
            for flag in &s.flags {
                eprintln!("flag: {flag:?}");
            }
            if summary.failed {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Eval {
            trajectory,
            groundtruth,
            landmarks,
            world,
            common,
        } => {
            let (_, out) = common.load()?;
            let trajectory = trajectory.unwrap_or_else(|| out.join(TRAJECTORY_FILE));
            let groundtruth = groundtruth.unwrap_or_else(|| out.join(GROUND_TRUTH_FILE));
            let landmarks = landmarks.unwrap_or_else(|| out.join(LANDMARKS_FILE));
            let world = world.unwrap_or_else(|| groundtruth.with_file_name(WORLD_FILE));
            let m = cmd_eval(
                &EvalInputs {
                    trajectory: &trajectory,
                    ground_truth: &groundtruth,
                    landmarks: &landmarks,
                    world: &world,
                },
                &out,
            )?;
            println!("{}", serde_json::to_string(&m)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
