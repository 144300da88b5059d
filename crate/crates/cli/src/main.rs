use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lidarmc_cli::commands;
use lidarmc_cli::{CliError, Completion, RunConfig};

#[derive(Parser)]
#[command(name = "lidarmc", version, about = "Lidar-inertial motion correction and dynamic point detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    /// Classification metrics against a truth CSV.
    Labels,
    /// Best-fraction distance to a reference cloud.
    Map,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlyDirection {
    Export,
    Import,
}

#[derive(Subcommand)]
enum Command {
    /// Generate points.csv, imu.csv and truth.csv from JSON specs.
    Simulate {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        sensors: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Motion-correct a lidar stream, writing corrected.csv and states.json.
    Undistort {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        imu: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Label corrected points as static, dynamic or unknown.
    Detect {
        #[arg(long)]
        corrected: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute metrics and write them as JSON.
    Evaluate {
        #[arg(long, value_enum)]
        mode: Mode,
        /// Labelled CSV (labels mode) or any t,x,y,z CSV (map mode).
        #[arg(long)]
        predicted: PathBuf,
        /// Truth CSV (labels mode) or reference cloud (map mode).
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert between t,x,y,z CSV files and ASCII PLY.
    Ply {
        #[arg(value_enum)]
        direction: PlyDirection,
        input: PathBuf,
        output: PathBuf,
    },
    /// Print the default configuration.
    DefaultConfig,
}

fn execute(command: Command) -> Result<Completion, CliError> {
    match command {
        Command::Simulate { scene, trajectory, sensors, out_dir, seed } => commands::simulate(&scene, &trajectory, &sensors, &out_dir, seed),
        Command::Undistort { points, imu, config, out_dir } => commands::undistort(&points, &imu, config.as_deref(), &out_dir),
        Command::Detect { corrected, config, out } => commands::detect(&corrected, config.as_deref(), &out),
        Command::Evaluate { mode: Mode::Labels, predicted, reference, config, out } => {
            let report = commands::evaluate_labels(&predicted, &reference, config.as_deref(), &out)?;
            print!("{}", report.table());
            Ok(Completion::Full)
        }
        Command::Evaluate { mode: Mode::Map, predicted, reference, config, out } => {
            let report = commands::evaluate_map(&predicted, &reference, config.as_deref(), &out)?;
            print!("{}", report.table());
            Ok(Completion::Full)
        }
        Command::Ply { direction: PlyDirection::Export, input, output } => commands::export_ply(&input, &output),
        Command::Ply { direction: PlyDirection::Import, input, output } => commands::import_ply(&input, &output),
        Command::DefaultConfig => {
            let json = serde_json::to_string_pretty(&RunConfig::default()).map_err(|e| CliError::Invalid(e.to_string()))?;
            println!("{json}");
            Ok(Completion::Full)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(done) => ExitCode::from(done.exit_code() as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
