use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use nalgebra::Vector3;
use clap::{Args, Parser, Subcommand, ValueEnum};
use slam_core::config::{ConfigError, Mode, PipelineConfig};
use slam_core::evaluation::{evaluate_auto, TrajectoryPair};
use slam_core::io::{read_kitti_poses, write_sequence, IoError};
use slam_core::pipeline::{ablate, ablation_csv, relative_to_first, run, AblationMode, PipelineError};
use slam_core::simulator::{generate_sequence, parse_scene, presets, Scene, SensorModel, SimError};
use slam_core::Pose;

#[derive(Parser)]
#[command(name = "slam", version, about = "LiDAR odometry and SLAM with intensity residuals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline over a directory of KITTI-format scans.
    Run(RunArgs),
    /// Render a synthetic sequence in KITTI format.
    Simulate(SimulateArgs),
    /// Compare an estimated trajectory against ground truth.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Also write the per-segment CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run several modes over the same input and print one CSV row per mode.
    Ablate {
        #[command(flatten)]
        common: ConfigArgs,
        /// Comma-separated subset of geometric, intensity, full.
        #[arg(long, value_delimiter = ',', default_value = "geometric,intensity,full")]
        modes: Vec<String>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ground-truth poses; defaults to `<input>/poses.txt` when present.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Run the back-end on the calling thread.
    #[arg(long)]
    sync: bool,
    /// Override a config key, e.g. `--set odometry.max_iterations=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    no_intensity: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Room,
    Corridor,
    SquareLoop,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sensor {
    Vlp16,
    Hdl64,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scene description file.
    #[arg(long, required_unless_present = "preset")]
    scene: Option<PathBuf>,
    /// Sensor poses, one KITTI pose line per frame.
    #[arg(long, required_unless_present = "preset")]
    trajectory: Option<PathBuf>,
    /// Built-in scene and trajectory; `--scene` and `--trajectory` override either.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "vlp16")]
    sensor: Sensor,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    noiseless: bool,
    #[arg(long, default_value_t = 0.1)]
    scan_period: f64,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(c) => c.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn load_config(args: &ConfigArgs) -> Result<PipelineConfig, CliError> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k, v)?;
    }
    cfg.input = Some(args.input.clone());
    if args.gt.is_some() {
        cfg.ground_truth = args.gt.clone();
    }
    if args.sync {
        cfg.sync = true;
    }
    Ok(cfg)
}

fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.common)?;
    if let Some(m) = &args.mode {
        cfg.mode = m.parse::<Mode>().map_err(CliError::Config)?;
    }
    if args.no_intensity {
        cfg.use_intensity = false;
    }
    if args.output.is_some() {
        cfg.output = args.output.clone();
    }
    cfg.validate()?;
    let summary = run(&cfg)?;
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    if summary.dropped_points > 0 {
        eprintln!("warning: dropped {} non-finite points", summary.dropped_points);
    }
    println!(
        "{} frames, {} keyframes, {} loops, {:.1} ms/frame",
        summary.frames, summary.keyframes, summary.loops, summary.mean_ms_per_frame
    );
    if let Some(report) = &summary.report {
        println!("{}", report.summary());
    }
    Ok(())
}

fn preset_scene(p: Preset) -> Scene {
    match p {
        Preset::Room => presets::room(),
        Preset::Corridor => presets::corridor(200.0, 2.0),
        Preset::SquareLoop => presets::loop_block(),
    }
}

fn preset_trajectory(p: Preset) -> Vec<Pose> {
    match p {
        Preset::Room => presets::arc(Pose::identity(), 50, 0.1, 1f64.to_radians()),
        Preset::Corridor => presets::varying_speed_line(60, 0.05, 0.25),
        Preset::SquareLoop => presets::square_loop(Vector3::new(-10.0, -10.0, 0.0), 20.0, 0.5, 6),
    }
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let scene = match (&args.scene, args.preset) {
        (Some(path), _) => parse_scene(&read(path)?).map_err(|e| CliError::Config(e.to_string()))?,
        (None, Some(p)) => preset_scene(p),
        (None, None) => unreachable!("clap requires --scene or --preset"),
    };
    let trajectory = match (&args.trajectory, args.preset) {
        (Some(path), _) => read_kitti_poses(&read(path)?).map_err(|e| CliError::Config(e.to_string()))?,
        (None, Some(p)) => preset_trajectory(p),
        (None, None) => unreachable!("clap requires --trajectory or --preset"),
    };
    let mut sensor = match args.sensor {
        Sensor::Vlp16 => SensorModel::vlp16(),
        Sensor::Hdl64 => SensorModel::hdl64(),
    };
    if args.noiseless {
        sensor = sensor.noiseless();
    }
    let (scans, poses) = generate_sequence(&scene, &trajectory, &sensor, args.seed, args.scan_period)?;
    write_sequence(&args.output, &scans, &poses)?;
    println!("wrote {} scans to {}", scans.len(), args.output.display());
    Ok(())
}

fn cmd_eval(est: &Path, gt: &Path, csv: Option<&Path>) -> Result<(), CliError> {
    let est = read_kitti_poses(&read(est)?)?;
    let gt = read_kitti_poses(&read(gt)?)?;
    let pair = TrajectoryPair::new(relative_to_first(&est), relative_to_first(&gt))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let report = evaluate_auto(&pair).map_err(|e| CliError::Runtime(e.to_string()))?;
    if let Some(path) = csv {
        write(path, &report.to_csv())?;
    }
    println!("{}", report.summary());
    Ok(())
}

fn cmd_ablate(common: &ConfigArgs, modes: &[String], output: Option<&Path>) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    cfg.validate()?;
    let modes = modes
        .iter()
        .map(|m| AblationMode::parse(m).ok_or_else(|| CliError::Config(format!("unknown mode '{m}'"))))
        .collect::<Result<Vec<_>, _>>()?;
    if cfg.ground_truth.is_none() && !common.input.join("poses.txt").exists() {
        return Err(CliError::Config("ablate needs ground truth (--gt or <input>/poses.txt)".into()));
    }
    let csv = ablation_csv(&ablate(&cfg, &modes)?);
    match output {
        Some(path) => write(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Eval { est, gt, csv } => cmd_eval(est, gt, csv.as_deref()),
        Command::Ablate { common, modes, output } => cmd_ablate(common, modes, output.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
