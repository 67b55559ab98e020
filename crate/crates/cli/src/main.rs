//! `mmvo`: stereo multi-motion visual odometry tool.
//!
//! Exit codes: 0 on success, 1 on runtime errors, 2 on usage errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "mmvo",
    version,
    about = "Stereo multi-motion visual odometry: simulate scenes, run the pipeline, evaluate trajectories"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a benchmark scene: track file, camera intrinsics, ground truth
    Simulate {
        /// Scene preset: L-static, S-static, L-1obj, S-1obj, fwdback-2obj
        #[arg(long)]
        preset: String,
        /// Output directory (created if missing)
        #[arg(long)]
        out: PathBuf,
        /// Override the robot speed in m/s
        #[arg(long)]
        speed: Option<f64>,
        /// Override the pixel noise sigma
        #[arg(long)]
        noise: Option<f64>,
        /// Override the outlier fraction (0..1)
        #[arg(long)]
        outliers: Option<f64>,
        /// Override the per-frame track dropout fraction (0..1)
        #[arg(long)]
        dropout: Option<f64>,
        /// Override the simulation seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the odometry pipeline over a track file
    Run {
        /// Track file (`frame_id timestamp track_id u_left v disparity` rows)
        #[arg(long)]
        tracks: PathBuf,
        /// Pipeline configuration file (`key = value` lines); defaults apply if omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Camera intrinsics file; defaults to camera.txt next to the track file
        #[arg(long)]
        camera: Option<PathBuf>,
        /// Output directory (created if missing)
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare an estimated trajectory against ground truth
    Eval {
        /// Estimated trajectory file
        #[arg(long)]
        est: PathBuf,
        /// Ground-truth trajectory file
        #[arg(long)]
        gt: PathBuf,
        /// Optional CSV of per-pose errors (timestamp, position, rotation)
        #[arg(long)]
        per_frame_csv: Option<PathBuf>,
    },
    /// Summarize every evaluated sequence directory under a root directory
    Report {
        /// Root directory; each subdirectory holding traj_robot.txt and
        /// gt_body_0.txt is treated as one sequence
        #[arg(long)]
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests land here too; they are not errors.
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Simulate {
            preset,
            out,
            speed,
            noise,
            outliers,
            dropout,
            seed,
        } => mmvo_cli::cmd_simulate(
            &preset,
            &out,
            &mmvo_cli::preset_overrides(speed, noise, outliers, dropout, seed),
        ),
        Command::Run {
            tracks,
            config,
            camera,
            out,
        } => mmvo_cli::cmd_run(&tracks, config.as_deref(), camera.as_deref(), &out),
        Command::Eval {
            est,
            gt,
            per_frame_csv,
        } => mmvo_cli::cmd_eval(&est, &gt, per_frame_csv.as_deref()),
        Command::Report { dir } => mmvo_cli::cmd_report(&dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}
