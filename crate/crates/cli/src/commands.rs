//! Subcommand implementations and the mapping from errors to exit codes.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use trivec_core::checkpoint::Checkpoint;
use trivec_core::config::RunConfig;
use trivec_core::pipeline::{self, ViewScore};
use trivec_core::render::{Camera, Image};
use trivec_core::scenes::{
    generate_dataset, write_nerf_synthetic, write_tensor_points, ProceduralScene, SceneDataset,
};
use trivec_core::Error;

use crate::{EvalArgs, InspectArgs, MakeSceneArgs, RenderArgs, TrainArgs};

/// Exit code for failures without a more specific code.
pub const EXIT_FAILURE: u8 = 1;
/// The dataset directory or split file does not exist.
pub const EXIT_MISSING_DATASET: u8 = 2;
/// The checkpoint is missing, truncated, corrupt or of another version.
pub const EXIT_BAD_CHECKPOINT: u8 = 3;
/// Images that must share a resolution do not.
pub const EXIT_RESOLUTION_MISMATCH: u8 = 4;

/// A failed command: exit code, short machine-readable kind and message.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    fn new(code: u8, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            kind,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::DimensionMismatch(_) => (EXIT_RESOLUTION_MISMATCH, "resolution-mismatch"),
            Error::Checkpoint(_) => (EXIT_BAD_CHECKPOINT, "bad-checkpoint"),
            Error::Config(_) => (EXIT_FAILURE, "config"),
            Error::NonFiniteLoss { .. } => (EXIT_FAILURE, "non-finite-loss"),
            Error::EmptyOccupancy { .. } | Error::EmptyGeometry => (EXIT_FAILURE, "empty-geometry"),
            Error::Io { .. } | Error::Image { .. } => (EXIT_FAILURE, "io"),
            Error::Parse { .. } | Error::NoFrames { .. } => (EXIT_FAILURE, "parse"),
            Error::InvalidArgument(_) => (EXIT_FAILURE, "invalid-argument"),
        };
        Self::new(code, kind, e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn io_error(path: &Path, e: io::Error) -> CliError {
    CliError::new(EXIT_FAILURE, "io", format!("{}: {e}", path.display()))
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path)
        .map_err(|e| CliError::new(EXIT_BAD_CHECKPOINT, "bad-checkpoint", e.to_string()))
}

/// Checks that `transforms_{split}.json` exists before loading it, so a
/// missing dataset gets its own exit code.
fn dataset_file(dir: Option<&Path>, split: &str) -> CliResult<PathBuf> {
    let dir = dir.ok_or_else(|| {
        CliError::new(
            EXIT_MISSING_DATASET,
            "missing-dataset",
            "no dataset path given",
        )
    })?;
    let file = dir.join(format!("transforms_{split}.json"));
    if !file.is_file() {
        return Err(CliError::new(
            EXIT_MISSING_DATASET,
            "missing-dataset",
            format!("{} not found", file.display()),
        ));
    }
    Ok(file)
}

/// Loads a split; `Ok(None)` when the split lists no frames.
fn load_split(
    config: &RunConfig,
    dir: Option<&Path>,
    split: &str,
) -> CliResult<Option<SceneDataset>> {
    dataset_file(dir, split)?;
    let config = RunConfig {
        dataset: dir.map(Path::to_path_buf),
        ..config.clone()
    };
    match pipeline::load_split(&config, split) {
        Ok(d) => Ok(Some(d)),
        Err(Error::NoFrames { .. }) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

pub fn train(args: &TrainArgs) -> CliResult {
    let mut overrides = args.overrides.clone();
    if let Some(steps) = args.steps {
        overrides.push(format!("train.steps={steps}"));
    }
    let mut config = RunConfig::load(&args.config)?.with_overrides(&overrides)?;
    if let Some(d) = &args.dataset {
        config.dataset = Some(d.clone());
    }
    if let Some(o) = &args.output {
        config.output_dir = o.clone();
    }
    let dataset =
        load_split(&config, config.dataset.as_deref(), &config.split)?.ok_or_else(|| {
            CliError::new(
                EXIT_FAILURE,
                "parse",
                format!("split `{}` has no frames", config.split),
            )
        })?;
    let model = pipeline::initialize(&config, &dataset)?;
    let report = model.param_report();
    log::info!(
        "{} tensors per scale, {} parameters",
        fmt_list(&report.tensors_per_scale),
        report.total()
    );
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let config_echo = out.join("config.json");
    fs::write(&config_echo, config.to_json()).map_err(|e| io_error(&config_echo, e))?;
    let outcome = pipeline::train_to_dir(&config, &dataset.views, model, out, |c| {
        log::info!("checkpoint at step {}", c.step);
        Ok(())
    })?;
    println!("{}", outcome.final_path.display());
    Ok(())
}

fn read_cameras(path: &Path) -> CliResult<Vec<Camera>> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let cameras: Vec<Camera> = serde_json::from_str(&text)
        .map_err(|e| CliError::new(EXIT_FAILURE, "parse", format!("{}: {e}", path.display())))?;
    for c in &cameras {
        c.validate()?;
    }
    Ok(cameras)
}

pub fn render(args: &RenderArgs) -> CliResult {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let cameras = match &args.cameras {
        Some(path) => read_cameras(path)?,
        None => {
            let dir = args.dataset.as_deref().or(ckpt.config.dataset.as_deref());
            load_split(&ckpt.config, dir, &args.split)?
                .map(|d| d.views.into_iter().map(|v| v.camera).collect())
                .unwrap_or_default()
        }
    };
    let paths = pipeline::render_to_dir(&ckpt.model, &cameras, &args.output, args.raw)?;
    log::info!(
        "rendered {} views into {}",
        paths.len(),
        args.output.display()
    );
    Ok(())
}

pub fn eval(args: &EvalArgs) -> CliResult {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let dir = args.dataset.as_deref().or(ckpt.config.dataset.as_deref());
    let scores: Vec<ViewScore> = match load_split(&ckpt.config, dir, &args.split)? {
        None => Vec::new(),
        Some(dataset) => match &args.predictions {
            None => pipeline::evaluate(&ckpt.model, &dataset, &ckpt.config.metrics)?,
            Some(pred_dir) => dataset
                .views
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let pred = Image::read_png(
                        &pred_dir.join(pipeline::render_name(i)),
                        ckpt.config.background,
                    )?;
                    Ok(pipeline::score(&pred, &v.image, &ckpt.config.metrics)?)
                })
                .collect::<CliResult<_>>()?,
        },
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    pipeline::write_scores_csv(&scores, &mut out)
        .and_then(|()| out.flush())
        .map_err(|e| io_error(Path::new("<stdout>"), e))
}

fn fmt_list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

pub fn inspect(args: &InspectArgs) -> CliResult {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let model = &ckpt.model;
    let report = model.param_report();
    let mut out = String::new();
    out.push_str(&format!("step,{}\n", ckpt.step));
    for (s, cloud) in model.scales.iter().enumerate() {
        let shape = cloud.shape();
        out.push_str(&format!(
            "scale{s},tensors={},res={}x{}x{},vectors={}\n",
            report.tensors_per_scale[s],
            shape.res[0],
            shape.res[1],
            shape.res[2],
            report.vectors_per_scale[s]
        ));
    }
    out.push_str(&format!("vectors,{}\n", report.vectors()));
    out.push_str(&format!(
        "appearance_matrices,{}\n",
        report.appearance_matrices
    ));
    out.push_str(&format!("mlp,{}\n", report.mlp));
    out.push_str(&format!("total,{}\n", report.total()));
    out.push_str(&format!(
        "total_millions,{:.6}\n",
        report.total() as f64 / 1e6
    ));
    let points = args.points.clone().unwrap_or_else(|| {
        let mut name = args.checkpoint.clone().into_os_string();
        name.push(".tensors.txt");
        PathBuf::from(name)
    });
    write_tensor_points(&points, model)?;
    print!("{out}");
    Ok(())
}

pub fn make_scene(args: &MakeSceneArgs) -> CliResult {
    let scene = match &args.scene {
        None => ProceduralScene::tiny(),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            let s: ProceduralScene = serde_json::from_str(&text).map_err(|e| {
                CliError::new(EXIT_FAILURE, "parse", format!("{}: {e}", path.display()))
            })?;
            ProceduralScene::new(s.primitives, s.aabb, s.background)?
        }
    };
    let train = generate_dataset(
        &scene,
        args.views,
        args.resolution,
        args.radius,
        args.angle,
        args.seed,
        "train",
    )?;
    write_nerf_synthetic(&train, &args.output)?;
    let test = if args.test_views == 0 {
        SceneDataset {
            views: Vec::new(),
            ..train.clone()
        }
    } else {
        generate_dataset(
            &scene,
            args.test_views,
            args.resolution,
            args.radius,
            args.angle,
            args.seed.wrapping_add(1),
            "test",
        )?
    };
    write_nerf_synthetic(
        &SceneDataset {
            split: "test".into(),
            ..test
        },
        &args.output,
    )?;
    let scene_path = args.output.join("scene.json");
    let text = serde_json::to_string_pretty(&scene).expect("scene always serializes");
    fs::write(&scene_path, text).map_err(|e| io_error(&scene_path, e))?;
    println!("{}", args.output.display());
    Ok(())
}
