use rayon::prelude::*;

use super::{sample_ray, Camera, Image, Jitter, Ray, Sample};
use crate::cloud::{Model, Neighbor, Neighbors};
use crate::decode::{direction_encoding_len, encode_direction_into, MlpCache};
use crate::real::{Real, Vec3};

/// How sample features become density and colour.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shading {
    /// Shifted softplus density and the colour MLP.
    Decoded,
    /// Diagnostic mode: `σ = max(f_σ, 0)` and a fixed colour, bypassing the decoder.
    Bypass { color: [f64; 3] },
}

/// Neighbours of one sample at one scale, as a range into the tracer's buffer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct ScaleSpan {
    pub scale: u8,
    pub start: u32,
    pub end: u32,
}

/// Forward intermediates of one sample that survived coverage filtering.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeptSample<T> {
    pub position: Vec3<T>,
    pub delta: T,
    pub f_sigma: T,
    pub sigma: T,
    /// Compositing weight `T_q (1 − e^{−σ_q δ_q})`.
    pub weight: T,
    /// Transmittance after this sample, `T_{q+1}`.
    pub trans_after: T,
    pub n_covering: u32,
    pub(crate) spans: (u32, u32),
    /// Decoded colour; zero when decoding was skipped.
    pub color: [T; 3],
    /// Index into the decoded-sample buffers, or `u32::MAX`.
    pub(crate) slot: u32,
}

impl<T> KeptSample<T> {
    pub fn decoded(&self) -> bool {
        self.slot != u32::MAX
    }
}

/// Reusable per-thread ray evaluator. After [`trace`](Self::trace) it holds
/// every intermediate the backward pass needs.
#[derive(Clone, Debug)]
pub struct RayTracer<T> {
    pub shading: Shading,
    samples: Vec<Sample<T>>,
    scratch: Neighbors<T>,
    pub(crate) kept: Vec<KeptSample<T>>,
    pub(crate) spans: Vec<ScaleSpan>,
    pub(crate) neighbors: Vec<Neighbor<T>>,
    pub(crate) direction: Vec3<T>,
    pub(crate) encoding: Vec<T>,
    pub(crate) dir_bias: Vec<T>,
    /// Per decoded sample: weighted component sums of every covering scale, concatenated.
    pub(crate) comps: Vec<T>,
    pub(crate) comp_starts: Vec<u32>,
    /// Per decoded sample: the `P`-dimensional multiscale appearance feature.
    pub(crate) features: Vec<T>,
    pub(crate) caches: Vec<MlpCache<T>>,
    projected: Vec<T>,
    pub(crate) t_final: T,
    pub(crate) background: [T; 3],
    pub(crate) pixel: [T; 3],
}

impl<T: Real> Default for RayTracer<T> {
    fn default() -> Self {
        Self::new(Shading::Decoded)
    }
}

impl<T: Real> RayTracer<T> {
    pub fn new(shading: Shading) -> Self {
        Self {
            shading,
            samples: Vec::new(),
            scratch: Neighbors::new(),
            kept: Vec::new(),
            spans: Vec::new(),
            neighbors: Vec::new(),
            direction: Vec3::zero(),
            encoding: Vec::new(),
            dir_bias: Vec::new(),
            comps: Vec::new(),
            comp_starts: Vec::new(),
            features: Vec::new(),
            caches: Vec::new(),
            projected: Vec::new(),
            t_final: T::one(),
            background: [T::one(); 3],
            pixel: [T::one(); 3],
        }
    }

    pub fn kept(&self) -> &[KeptSample<T>] {
        &self.kept
    }

    pub fn final_transmittance(&self) -> T {
        self.t_final
    }

    pub fn pixel(&self) -> [T; 3] {
        self.pixel
    }

    /// Renders one ray, recording intermediates.
    pub fn trace(&mut self, model: &Model<T>, ray: &Ray<T>, jitter: Option<Jitter>) -> [T; 3] {
        self.trace_with_background(model, ray, jitter, model.background.map(T::lit))
    }

    pub fn trace_with_background(
        &mut self,
        model: &Model<T>,
        ray: &Ray<T>,
        jitter: Option<Jitter>,
        background: [T; 3],
    ) -> [T; 3] {
        self.kept.clear();
        self.spans.clear();
        self.neighbors.clear();
        self.comps.clear();
        self.comp_starts.clear();
        self.features.clear();
        self.background = background;
        self.direction = ray.dir;
        let settings = model.settings;
        sample_ray(
            ray,
            model.occupancy.as_ref(),
            T::lit(settings.step_size),
            jitter,
            &mut self.samples,
        );

        let early_stop = T::lit(settings.early_stop_transmittance);
        let mut trans = T::one();
        for s in &self.samples {
            let span_start = self.spans.len() as u32;
            let mut f_sigma = T::zero();
            let mut n_covering = 0u32;
            for (si, cloud) in model.scales.iter().enumerate() {
                cloud.query_into(s.position, cloud.neighbors(), &mut self.scratch);
                if self.scratch.is_empty() {
                    continue;
                }
                f_sigma += cloud.density_feature(s.position, &self.scratch);
                n_covering += 1;
                let start = self.neighbors.len() as u32;
                self.neighbors.extend_from_slice(&self.scratch);
                self.spans.push(ScaleSpan {
                    scale: si as u8,
                    start,
                    end: self.neighbors.len() as u32,
                });
            }
            if n_covering == 0 {
                continue;
            }
            f_sigma /= T::from_count(n_covering as usize);
            let sigma = match self.shading {
                Shading::Decoded => model.decoder.activation.density(f_sigma),
                Shading::Bypass { .. } => f_sigma.max(T::zero()),
            };
            let decay = (-sigma * s.delta).exp();
            let weight = trans * (T::one() - decay);
            trans *= decay;
            self.kept.push(KeptSample {
                position: s.position,
                delta: s.delta,
                f_sigma,
                sigma,
                weight,
                trans_after: trans,
                n_covering,
                spans: (span_start, self.spans.len() as u32),
                color: [T::zero(); 3],
                slot: u32::MAX,
            });
            if trans < early_stop {
                break;
            }
        }
        self.t_final = trans;

        let threshold = T::lit(settings.color_weight_threshold);
        match self.shading {
            Shading::Bypass { color } => {
                for k in &mut self.kept {
                    k.color = color.map(T::lit);
                }
            }
            Shading::Decoded => self.decode_colors(model, threshold),
        }

        let mut pixel = background.map(|b| b * trans);
        for k in &self.kept {
            for c in 0..3 {
                pixel[c] += k.weight * k.color[c];
            }
        }
        self.pixel = pixel;
        pixel
    }

    fn decode_colors(&mut self, model: &Model<T>, threshold: T) {
        let decoder = &model.decoder;
        let mlp = &decoder.mlp;
        let dim = decoder.feature_dim();
        let mut prepared = false;
        let mut slot = 0usize;
        for q in 0..self.kept.len() {
            let k = self.kept[q];
            if !(k.weight > threshold || threshold <= T::zero()) {
                continue;
            }
            if !prepared {
                self.encoding
                    .resize(direction_encoding_len(decoder.n_freq), T::zero());
                encode_direction_into(self.direction, decoder.n_freq, &mut self.encoding);
                self.dir_bias = mlp.direction_bias(&self.encoding);
                self.projected.resize(dim, T::zero());
                prepared = true;
            }
            self.comp_starts.push(self.comps.len() as u32);
            let feat_start = self.features.len();
            self.features.resize(feat_start + dim, T::zero());
            for span in &self.spans[k.spans.0 as usize..k.spans.1 as usize] {
                let cloud = &model.scales[span.scale as usize];
                let rank = cloud.shape().appearance_rank;
                let cstart = self.comps.len();
                self.comps.resize(cstart + rank, T::zero());
                let nbs = &self.neighbors[span.start as usize..span.end as usize];
                cloud.appearance_into(k.position, nbs, &mut self.comps[cstart..]);
                decoder.appearance[span.scale as usize]
                    .apply_into(&self.comps[cstart..], &mut self.projected);
                for (f, &v) in self.features[feat_start..].iter_mut().zip(&self.projected) {
                    *f += v;
                }
            }
            let inv = T::one() / T::from_count(k.n_covering as usize);
            for f in &mut self.features[feat_start..] {
                *f *= inv;
            }
            if self.caches.len() <= slot {
                self.caches.push(MlpCache::default());
            }
            let color = mlp.forward_cached(
                &self.features[feat_start..],
                &self.dir_bias,
                &mut self.caches[slot],
            );
            let kept = &mut self.kept[q];
            kept.color = color;
            kept.slot = slot as u32;
            slot += 1;
        }
    }
}

/// Renders a single ray without jitter.
pub fn render_pixel<T: Real>(model: &Model<T>, ray: &Ray<T>) -> [T; 3] {
    RayTracer::default().trace(model, ray, None)
}

/// Renders every pixel of `camera`. Rows run in parallel; each pixel is
/// computed independently, so the result does not depend on thread count.
pub fn render_image<T: Real>(model: &Model<T>, camera: &Camera) -> Image {
    render_image_with(model, camera, Shading::Decoded)
}

pub fn render_image_with<T: Real>(model: &Model<T>, camera: &Camera, shading: Shading) -> Image {
    let w = camera.width;
    let rows: Vec<Vec<f32>> = (0..camera.height)
        .into_par_iter()
        .map_init(
            || RayTracer::<T>::new(shading),
            |tracer, row| {
                let mut out = Vec::with_capacity(3 * w);
                for col in 0..w {
                    let ray = camera.ray::<T>(row, col, &model.aabb);
                    let rgb = tracer.trace(model, &ray, None);
                    out.extend(rgb.iter().map(|v| v.as_f64() as f32));
                }
                out
            },
        )
        .collect();
    Image::from_data(w, camera.height, rows.concat()).expect("row lengths match the camera")
}
