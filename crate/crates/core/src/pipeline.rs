//! End-to-end orchestration shared by the command line and the tests:
//! initial geometry, training with periodic checkpoints, rendering and
//! evaluation.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::cloud::Model;
use crate::config::{MetricFlags, RunConfig};
use crate::error::{Error, Result};
use crate::learn::{MetricsRow, Trainer};
use crate::render::{render_image, Camera, Image, View};
use crate::scenes::{
    coarse_occupancy, load_geometry, load_nerf_synthetic, psnr, ssim, Geometry, SceneDataset,
};

/// Loads `split` from the configured dataset directory.
pub fn load_split(config: &RunConfig, split: &str) -> Result<SceneDataset> {
    let dir = config
        .dataset
        .as_deref()
        .ok_or_else(|| Error::Config("no dataset path configured".into()))?;
    load_nerf_synthetic(dir, split, config.background, config.aabb)
}

/// Points (and possibly an occupancy grid) to place tensors around: the
/// configured geometry file if any, otherwise the coarse pass on `dataset`.
pub fn initial_geometry(config: &RunConfig, dataset: &SceneDataset) -> Result<Geometry> {
    match &config.geometry {
        Some(path) => load_geometry(path, config.aabb),
        None => {
            let coarse = coarse_occupancy(dataset, &config.coarse, config.seed)?;
            log::info!(
                "coarse occupancy: {} voxels ({} above threshold)",
                coarse.occupancy.count(),
                coarse.raw_count
            );
            Ok(Geometry {
                points: coarse.points,
                occupancy: Some(coarse.occupancy),
            })
        }
    }
}

/// Builds the untrained model for `dataset`.
pub fn initialize(config: &RunConfig, dataset: &SceneDataset) -> Result<Model<f32>> {
    let geometry = initial_geometry(config, dataset)?;
    config.build_model(&geometry.points, geometry.occupancy)
}

/// Name of the periodic checkpoint written after `step` steps.
pub fn checkpoint_name(step: usize) -> String {
    format!("step_{step:06}.ckpt")
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

/// What a training run produced.
#[derive(Debug)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub checkpoint: Checkpoint,
    pub final_path: PathBuf,
}

/// Trains `model` for `config.train.steps` steps, writing `metrics.csv`,
/// a checkpoint every `config.checkpoint_every` steps and `final.ckpt`
/// into `out_dir`. `on_checkpoint` sees every checkpoint as it is written.
pub fn train_to_dir(
    config: &RunConfig,
    views: &[View],
    model: Model<f32>,
    out_dir: &Path,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let io = |e| Error::io(&metrics_path, e);
    writeln!(metrics, "{}", MetricsRow::HEADER).map_err(io)?;

    let snapshot = |t: &Trainer<f32>| Checkpoint {
        config: config.clone(),
        step: t.steps_done() as u64,
        model: t.model().clone(),
        adam: Some(t.adam().clone()),
    };
    let mut trainer = Trainer::new(model, config.train_config(), views)?;
    let mut rows = Vec::new();
    while trainer.steps_done() < config.train.steps {
        let report = trainer.step()?;
        if trainer.is_log_step() {
            let row = trainer.metrics_row(&report);
            log::info!(
                "step {:>6}  loss {:.6}  psnr {:.2}",
                row.step,
                row.loss,
                row.psnr
            );
            row.write_csv(&mut metrics).map_err(io)?;
            metrics.flush().map_err(io)?;
            rows.push(row);
        }
        let step = trainer.steps_done();
        if config.checkpoint_every > 0
            && step % config.checkpoint_every == 0
            && step < config.train.steps
        {
            let ckpt = snapshot(&trainer);
            ckpt.save(&out_dir.join(checkpoint_name(step)))?;
            on_checkpoint(&ckpt)?;
        }
    }
    metrics.flush().map_err(io)?;
    let checkpoint = snapshot(&trainer);
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    checkpoint.save(&final_path)?;
    on_checkpoint(&checkpoint)?;
    Ok(TrainOutcome {
        rows,
        checkpoint,
        final_path,
    })
}

/// File name of the `index`-th rendered view.
pub fn render_name(index: usize) -> String {
    format!("r_{index:03}.png")
}

/// Renders every camera into `out_dir` as PNG (and `.raw` float dumps when
/// `raw` is set); returns the PNG paths in camera order.
pub fn render_to_dir(
    model: &Model<f32>,
    cameras: &[Camera],
    out_dir: &Path,
    raw: bool,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::with_capacity(cameras.len());
    for (i, camera) in cameras.iter().enumerate() {
        let image = render_image(model, camera);
        let path = out_dir.join(render_name(i));
        image.write_png(&path)?;
        if raw {
            image.write_raw(&path.with_extension("raw"))?;
        }
        paths.push(path);
    }
    Ok(paths)
}

/// Image-quality scores of one view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewScore {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

/// Scores `prediction` against `truth` with the enabled metrics.
pub fn score(prediction: &Image, truth: &Image, flags: &MetricFlags) -> Result<ViewScore> {
    if !prediction.same_size(truth) {
        return Err(Error::DimensionMismatch(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            prediction.width(),
            prediction.height(),
            truth.width(),
            truth.height()
        )));
    }
    Ok(ViewScore {
        psnr: flags.psnr.then(|| psnr(prediction, truth)).transpose()?,
        ssim: flags.ssim.then(|| ssim(prediction, truth)).transpose()?,
    })
}

/// Renders every view of `dataset` and scores it.
pub fn evaluate(
    model: &Model<f32>,
    dataset: &SceneDataset,
    flags: &MetricFlags,
) -> Result<Vec<ViewScore>> {
    dataset
        .views
        .iter()
        .map(|v| score(&render_image(model, &v.camera), &v.image, flags))
        .collect()
}

/// Mean of the present values, or `None` when there are none.
pub fn mean_score(scores: &[ViewScore]) -> ViewScore {
    let mean = |get: fn(&ViewScore) -> Option<f64>| {
        let vals: Vec<f64> = scores.iter().filter_map(get).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    ViewScore {
        psnr: mean(|s| s.psnr),
        ssim: mean(|s| s.ssim),
    }
}

/// Writes `view,psnr,ssim` rows and a final `mean` row; an empty list
/// yields only the header. Disabled metrics are left blank.
pub fn write_scores_csv(scores: &[ViewScore], w: &mut impl Write) -> std::io::Result<()> {
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    writeln!(w, "view,psnr,ssim")?;
    for (i, s) in scores.iter().enumerate() {
        writeln!(w, "{i},{},{}", cell(s.psnr), cell(s.ssim))?;
    }
    if !scores.is_empty() {
        let m = mean_score(scores);
        writeln!(w, "mean,{},{}", cell(m.psnr), cell(m.ssim))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scores_csv_layout() {
        let mut out = Vec::new();
        write_scores_csv(&[], &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "view,psnr,ssim\n");
        let scores = [
            ViewScore {
                psnr: Some(20.0),
                ssim: None,
            },
            ViewScore {
                psnr: Some(30.0),
                ssim: None,
            },
        ];
        let mut out = Vec::new();
        write_scores_csv(&scores, &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "view,psnr,ssim\n0,20.000000,\n1,30.000000,\nmean,25.000000,\n"
        );
    }

    #[test]
    fn score_rejects_size_mismatch() {
        let a = Image::new(4, 4);
        let b = Image::new(4, 5);
        assert!(matches!(
            score(&a, &b, &MetricFlags::default()),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
