//! `se3lio` command-line harness: Monte Carlo experiments, deskewing and
//! filter runs driven by a JSON config.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::{PointsSource, Source};
use config::RunConfig;
use error::CliError;
use se3lio::eskf::Ablation;

#[derive(Debug, Parser)]
#[command(name = "se3lio", version, about = "SE(3) LiDAR-inertial odometry experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (created if missing); overrides the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Random seed; overrides the config.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Synthesize IMU and scans from the config's `sim` section.
    #[arg(long, conflicts_with_all = ["imu", "points", "points_dir"])]
    synthetic: bool,
    /// IMU CSV with header `t,gx,gy,gz,ax,ay,az`.
    #[arg(long, value_name = "PATH", required_unless_present = "synthetic")]
    imu: Option<PathBuf>,
    /// Points CSV with header `scan,t,x,y,z`.
    #[arg(long, value_name = "PATH", conflicts_with = "points_dir", required_unless_present_any = ["synthetic", "points_dir"])]
    points: Option<PathBuf>,
    /// Directory with one `t,x,y,z` CSV per scan, read in file-name order.
    #[arg(long, value_name = "DIR")]
    points_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AblationArg {
    Full,
    NoUamc,
    Baseline,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::NoUamc => Ablation::NoUamc,
            AblationArg::Baseline => Ablation::Baseline,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Noiseless propagation error of both models against dense ground truth.
    Fig2 {
        #[command(flatten)]
        common: Common,
    },
    /// Monte Carlo consistency of relative-pose covariances.
    Fig3 {
        #[command(flatten)]
        common: Common,
    },
    /// Propagate and deskew scans without measurement updates.
    Undistort {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Run the filter over a dataset.
    Lio {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Override the filter variant: SE(3) with or without deskewing
        /// uncertainty, or the SO(3) x R^3 baseline.
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
    },
}

impl DataArgs {
    fn source(&self) -> Source {
        if self.synthetic {
            return Source::Synthetic;
        }
        let points = match (&self.points, &self.points_dir) {
            (Some(p), _) => PointsSource::Table(p.clone()),
            (None, Some(d)) => PointsSource::Directory(d.clone()),
            (None, None) => unreachable!("clap requires a points source"),
        };
        Source::Files {
            imu: self.imu.clone().expect("clap requires --imu"),
            points,
        }
    }
}

fn prepare(common: &Common) -> Result<(RunConfig, u64, PathBuf), CliError> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let seed = common.seed.unwrap_or(cfg.seed);
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out).map_err(|e| CliError::Input(format!("{}: {e}", out.display())))?;
    Ok((cfg, seed, out))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Fig2 { common } => {
            let (cfg, _, out) = prepare(&common)?;
            commands::fig2(&cfg, &out)
        }
        Command::Fig3 { common } => {
            let (cfg, seed, out) = prepare(&common)?;
            commands::fig3(&cfg, seed, &out)
        }
        Command::Undistort { common, data } => {
            let (cfg, seed, out) = prepare(&common)?;
            commands::undistort(&cfg, seed, &data.source(), &out)
        }
        Command::Lio { common, data, ablation } => {
            let (cfg, seed, out) = prepare(&common)?;
            commands::lio(&cfg, seed, &data.source(), ablation.map(Ablation::from), &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
