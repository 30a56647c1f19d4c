use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamParams, AdamState};
use super::loss::{add_l1_subgradient, batch_psnr, l1_density_loss, total_loss, LossReport};
use super::pass::{backprop_ray, BackpropScratch};
use super::schedule::{decayed_lr, UpsampleSchedule};
use super::GradientStore;
use crate::cloud::Model;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::render::{Jitter, RayTracer, View};

/// Salt separating the jitter streams from the batch-selection streams.
const JITTER_SALT: u64 = 0x6a09_e667_f3bc_c908;

/// Optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_rays: usize,
    pub lr_vectors: f64,
    pub lr_networks: f64,
    /// Weight of the L1 density regularizer.
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps after which factor vectors are upsampled; events at or past
    /// `steps` never happen.
    pub upsample_steps: Vec<usize>,
    /// Learning rates decay exponentially to `lr_decay ×` their initial value.
    pub lr_decay: f64,
    /// Metrics are recorded every this many steps (and at the last step).
    pub log_every: usize,
    /// Jitter sample positions within their marching interval.
    pub jitter: bool,
    /// Rays of a batch are split into this many fixed chunks whose gradients
    /// are reduced in order, so results do not depend on the thread count.
    pub chunks: usize,
    /// Per-scale `[start, end]` vector resolutions; filled from the scale specs.
    #[serde(skip)]
    pub resolutions: Vec<[usize; 2]>,
    /// Filled from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 30_000,
            batch_rays: 4096,
            lr_vectors: 0.02,
            lr_networks: 0.001,
            alpha: 1e-5,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            upsample_steps: vec![2000, 3000, 4000, 5500, 7000],
            lr_decay: 0.1,
            log_every: 100,
            jitter: true,
            chunks: 8,
            resolutions: vec![[29, 121], [15, 61], [7, 31]],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr_vectors >= 0.0 && self.lr_networks >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if self.batch_rays == 0 || self.chunks == 0 {
            return bad("batch_rays and chunks must be positive");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return bad("Adam needs 0 <= beta < 1 and eps > 0");
        }
        if !(self.lr_decay > 0.0) {
            return bad("lr_decay must be positive");
        }
        if self.upsample_steps.windows(2).any(|w| w[0] >= w[1]) {
            return bad("upsample_steps must be strictly increasing");
        }
        Ok(())
    }

    fn adam(&self) -> AdamParams {
        AdamParams {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// One row of the metrics CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub render_loss: f64,
    pub l1_loss: f64,
    pub psnr: f64,
    pub lr_vectors: f64,
    pub lr_networks: f64,
    pub n_params: usize,
}

impl MetricsRow {
    pub const HEADER: &'static str =
        "step,loss,render_loss,l1_loss,psnr,lr_vectors,lr_networks,n_params";

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.loss,
            self.render_loss,
            self.l1_loss,
            self.psnr,
            self.lr_vectors,
            self.lr_networks,
            self.n_params
        )
    }
}

/// Result of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Number of completed steps, including this one.
    pub step: usize,
    pub loss: LossReport,
    pub lr_vectors: f64,
    pub lr_networks: f64,
    pub upsampled: bool,
}

struct Chunk<T> {
    tracer: RayTracer<T>,
    grads: GradientStore<T>,
    scratch: BackpropScratch<T>,
    sq_err: f64,
}

impl<T: Real> Chunk<T> {
    fn new(model: &Model<T>) -> Self {
        Self {
            tracer: RayTracer::default(),
            grads: GradientStore::for_model(model),
            scratch: BackpropScratch::default(),
            sq_err: 0.0,
        }
    }
}

/// Stateful optimizer over a fixed set of training views.
pub struct Trainer<'a, T: Real> {
    model: Model<T>,
    config: TrainConfig,
    views: &'a [View],
    pixel_offsets: Vec<usize>,
    schedule: UpsampleSchedule,
    adam: AdamState<T>,
    chunks: Vec<Chunk<T>>,
    total: GradientStore<T>,
    indices: Vec<usize>,
    step: usize,
}

impl<'a, T: Real> Trainer<'a, T> {
    pub fn new(model: Model<T>, config: TrainConfig, views: &'a [View]) -> Result<Self> {
        let adam = AdamState::for_model(&model);
        Self::resume(model, config, views, adam, 0)
    }

    /// Continues from a saved optimizer state after `step` completed steps.
    pub fn resume(
        model: Model<T>,
        config: TrainConfig,
        views: &'a [View],
        adam: AdamState<T>,
        step: usize,
    ) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        if views.is_empty() {
            return Err(Error::invalid("training needs at least one view"));
        }
        if config.resolutions.len() != model.scales.len() {
            return Err(Error::Config(format!(
                "{} resolution schedules for {} scales",
                config.resolutions.len(),
                model.scales.len()
            )));
        }
        if !adam.matches(&model) {
            return Err(Error::DimensionMismatch(
                "optimizer state does not match the model".into(),
            ));
        }
        for v in views {
            if v.image.width() != v.camera.width || v.image.height() != v.camera.height {
                return Err(Error::DimensionMismatch(
                    "view image and camera sizes differ".into(),
                ));
            }
        }
        let schedule = UpsampleSchedule::new(&config.upsample_steps, &config.resolutions)?;
        let mut pixel_offsets = Vec::with_capacity(views.len() + 1);
        let mut acc = 0;
        pixel_offsets.push(0);
        for v in views {
            acc += v.image.pixel_count();
            pixel_offsets.push(acc);
        }
        let chunks = (0..config.chunks).map(|_| Chunk::new(&model)).collect();
        let total = GradientStore::for_model(&model);
        Ok(Self {
            model,
            config,
            views,
            pixel_offsets,
            schedule,
            adam,
            chunks,
            total,
            indices: Vec::new(),
            step,
        })
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn adam(&self) -> &AdamState<T> {
        &self.adam
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn schedule(&self) -> &UpsampleSchedule {
        &self.schedule
    }

    /// Completed steps.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn into_parts(self) -> (Model<T>, AdamState<T>, usize) {
        (self.model, self.adam, self.step)
    }

    pub fn learning_rates(&self) -> (f64, f64) {
        (
            decayed_lr(
                self.config.lr_vectors,
                self.config.lr_decay,
                self.step,
                self.config.steps,
            ),
            decayed_lr(
                self.config.lr_networks,
                self.config.lr_decay,
                self.step,
                self.config.steps,
            ),
        )
    }

    fn pixel(&self, idx: usize) -> (usize, usize, usize) {
        let v = self.pixel_offsets.partition_point(|&o| o <= idx) - 1;
        let local = idx - self.pixel_offsets[v];
        let w = self.views[v].image.width();
        (v, local / w, local % w)
    }

    /// Runs one forward/backward/update step.
    pub fn step(&mut self) -> Result<StepReport> {
        let step = self.step;
        let (lr_v, lr_n) = self.learning_rates();
        let total_pixels = *self.pixel_offsets.last().unwrap();
        let batch = self.config.batch_rays;

        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step as u64);
        self.indices.clear();
        self.indices
            .extend((0..batch).map(|_| rng.random_range(0..total_pixels)));

        let per_chunk = batch.div_ceil(self.chunks.len());
        let grad_scale = T::lit(2.0 / batch as f64);
        let jitter_seed = self.config.seed ^ JITTER_SALT;
        let jitter = self.config.jitter;
        let mut chunks = std::mem::take(&mut self.chunks);
        chunks.par_iter_mut().enumerate().for_each(|(c, chunk)| {
            chunk.grads.zero();
            chunk.sq_err = 0.0;
            let lo = (c * per_chunk).min(batch);
            let hi = ((c + 1) * per_chunk).min(batch);
            for i in lo..hi {
                let (v, row, col) = self.pixel(self.indices[i]);
                let view = &self.views[v];
                let ray = view.camera.ray::<T>(row, col, &self.model.aabb);
                let j = jitter.then_some(Jitter {
                    seed: jitter_seed,
                    stream: ((step as u64) << 32) | i as u64,
                });
                let pred = chunk.tracer.trace(&self.model, &ray, j);
                let truth = view.image.get(row, col);
                let mut grad = [T::zero(); 3];
                for ch in 0..3 {
                    let d = pred[ch] - T::lit(truth[ch] as f64);
                    chunk.sq_err += d.as_f64() * d.as_f64();
                    grad[ch] = grad_scale * d;
                }
                backprop_ray(
                    &chunk.tracer,
                    &self.model,
                    grad,
                    &mut chunk.grads,
                    &mut chunk.scratch,
                );
            }
        });
        self.total.zero();
        let mut sq_err = 0.0;
        for chunk in &chunks {
            self.total.add_assign(&chunk.grads);
            sq_err += chunk.sq_err;
        }
        self.chunks = chunks;

        let render_loss = sq_err / batch as f64;
        if !render_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                lr_vectors: lr_v,
                lr_networks: lr_n,
                max_grad: self.total.max_abs(),
            });
        }
        self.apply_update(lr_v, lr_n);
        self.step += 1;
        let upsampled = self.maybe_upsample()?;
        let l1 = if self.config.alpha > 0.0 || self.is_log_step() {
            l1_density_loss(&self.model)
        } else {
            0.0
        };
        Ok(StepReport {
            step: self.step,
            loss: LossReport {
                render_loss,
                l1_loss: l1,
                total: total_loss(render_loss, l1, self.config.alpha),
                psnr: batch_psnr(render_loss),
            },
            lr_vectors: lr_v,
            lr_networks: lr_n,
            upsampled,
        })
    }

    /// Whether the last completed step is a logging step.
    pub fn is_log_step(&self) -> bool {
        self.step == self.config.steps
            || (self.config.log_every > 0 && self.step % self.config.log_every == 0)
    }

    fn apply_update(&mut self, lr_v: f64, lr_n: f64) {
        self.adam.step += 1;
        let t = self.adam.step;
        let hp = self.config.adam();
        let n = self.model.density_entry_count().max(1);
        let l1 = T::lit(self.config.alpha / n as f64);
        let total = &self.total;
        for (s, cloud) in self.model.scales.iter_mut().enumerate() {
            let density_len = cloud.shape().density_len();
            let (ms, vs) = (&mut self.adam.tensors_m[s], &mut self.adam.tensors_v[s]);
            cloud
                .tensors_mut()
                .par_iter_mut()
                .zip(ms.par_iter_mut().zip(vs.par_iter_mut()))
                .enumerate()
                .for_each_init(Vec::new, |g, (i, (tensor, (m, v)))| {
                    g.clear();
                    g.extend_from_slice(total.tensor(s, i));
                    if l1 != T::zero() {
                        add_l1_subgradient(
                            &tensor.factors()[..density_len],
                            l1,
                            &mut g[..density_len],
                        );
                    }
                    adam_step(tensor.factors_mut(), g, m, v, lr_v, hp, t);
                });
        }
        let dec = &mut self.model.decoder;
        for (((b, g), m), v) in dec
            .appearance
            .iter_mut()
            .zip(&total.appearance)
            .zip(&mut self.adam.appearance_m)
            .zip(&mut self.adam.appearance_v)
        {
            adam_step(b.entries_mut(), g, m, v, lr_n, hp, t);
        }
        for (((p, g), m), v) in dec
            .mlp
            .buffers_mut()
            .zip(total.mlp.buffers())
            .zip(self.adam.mlp_m.buffers_mut())
            .zip(self.adam.mlp_v.buffers_mut())
        {
            adam_step(p, g, m, v, lr_n, hp, t);
        }
    }

    /// Applies the scheduled resolution increase if the completed step count
    /// is an upsampling event.
    pub fn maybe_upsample(&mut self) -> Result<bool> {
        let Some(res) = self.schedule.at(self.step) else {
            return Ok(false);
        };
        for (s, &r) in res.iter().enumerate() {
            let r3 = [r; 3];
            if self.model.scales[s].shape().res == r3 {
                continue;
            }
            self.adam.upsample_scale(&self.model, s, r3)?;
            self.model.scales[s].upsample(r3)?;
            log::info!("step {}: scale {s} vectors upsampled to {r}", self.step);
        }
        for chunk in &mut self.chunks {
            chunk.grads.resize_for(&self.model);
        }
        self.total.resize_for(&self.model);
        Ok(true)
    }

    /// Metrics for the step just reported.
    pub fn metrics_row(&self, r: &StepReport) -> MetricsRow {
        MetricsRow {
            step: r.step,
            loss: r.loss.total,
            render_loss: r.loss.render_loss,
            l1_loss: r.loss.l1_loss,
            psnr: r.loss.psnr,
            lr_vectors: r.lr_vectors,
            lr_networks: r.lr_networks,
            n_params: self.model.param_report().total(),
        }
    }

    /// Runs until `config.steps`, calling `on_log` at every logged step.
    pub fn run(
        &mut self,
        mut on_log: impl FnMut(&MetricsRow, &Model<T>) -> Result<()>,
    ) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        while self.step < self.config.steps {
            let r = self.step()?;
            if self.is_log_step() {
                let row = self.metrics_row(&r);
                log::info!(
                    "step {:>6}  loss {:.6}  psnr {:.2}  lr {:.2e}/{:.2e}",
                    row.step,
                    row.loss,
                    row.psnr,
                    row.lr_vectors,
                    row.lr_networks
                );
                on_log(&row, &self.model)?;
                rows.push(row);
            }
        }
        Ok(rows)
    }
}

/// Trains `model` on `views` for `config.steps` steps.
pub fn train<T: Real>(
    model: Model<T>,
    config: TrainConfig,
    views: &[View],
) -> Result<(Model<T>, Vec<MetricsRow>)> {
    let mut trainer = Trainer::new(model, config, views)?;
    let rows = trainer.run(|_, _| Ok(()))?;
    Ok((trainer.into_parts().0, rows))
}
