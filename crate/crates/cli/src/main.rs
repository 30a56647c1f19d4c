//! `trivec`: train, render, evaluate and inspect tri-vector radiance fields.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "trivec",
    version,
    about = "Sparse multi-scale tri-vector radiance fields"
)]
struct Cli {
    /// Worker threads; 0 uses every core. `--threads 1` makes runs reproducible bit for bit.
    #[arg(long, global = true, env = "TRIVEC_THREADS", default_value_t = 0)]
    threads: usize,

    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, env = "TRIVEC_LOG", default_value = "info")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate geometry, place tensors and optimize; writes checkpoints and metrics.csv.
    Train(TrainArgs),
    /// Render a checkpoint for the cameras of a dataset split or a camera file.
    Render(RenderArgs),
    /// Render a dataset split and print per-view and mean PSNR/SSIM as CSV.
    Eval(EvalArgs),
    /// Print tensor and parameter counts and write the tensor point cloud.
    Inspect(InspectArgs),
    /// Render a procedural scene into a dataset in the NeRF blender layout.
    MakeScene(MakeSceneArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON run configuration.
    pub config: PathBuf,
    /// Override a config value, e.g. `train.steps=500`, `scales[2].M=2`, `scales=2of3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set train.steps=N`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Shorthand for `--set dataset=DIR`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Shorthand for `--set output_dir=DIR`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    pub checkpoint: PathBuf,
    /// Dataset directory; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// JSON array of cameras (`width`, `height`, `focal`, `pose`) instead of a dataset split.
    #[arg(long, conflicts_with_all = ["dataset"])]
    pub cameras: Option<PathBuf>,
    #[arg(long, short, default_value = "renders")]
    pub output: PathBuf,
    /// Also write raw little-endian float images next to the PNGs.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    /// Dataset directory; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Score existing renders (`r_000.png`, ...) from this directory instead of rendering.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    pub checkpoint: PathBuf,
    /// Tensor point-cloud output (`x y z edge` per line); defaults to `<checkpoint>.tensors.txt`.
    #[arg(long)]
    pub points: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MakeSceneArgs {
    /// Output dataset directory.
    pub output: PathBuf,
    /// Procedural scene JSON; defaults to the built-in two boxes and a sphere.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long, default_value_t = 24)]
    pub views: usize,
    /// Views in the test split; 0 writes an empty test split.
    #[arg(long, default_value_t = 8)]
    pub test_views: usize,
    #[arg(long, default_value_t = 96)]
    pub resolution: usize,
    /// Camera distance from the origin.
    #[arg(long, default_value_t = 4.0)]
    pub radius: f64,
    /// Horizontal field of view in radians.
    #[arg(long, default_value_t = 0.6911112)]
    pub angle: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
    {
        eprintln!("error[threads]: {e}");
        return ExitCode::FAILURE;
    }
    let result = match &cli.command {
        Command::Train(a) => commands::train(a),
        Command::Render(a) => commands::render(a),
        Command::Eval(a) => commands::eval(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::MakeScene(a) => commands::make_scene(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError {
            code,
            kind,
            message,
        }) => {
            eprintln!("error[{kind}]: {}", message.replace('\n', " "));
            ExitCode::from(code)
        }
    }
}
