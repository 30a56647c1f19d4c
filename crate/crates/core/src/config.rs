//! Run configuration: one JSON document with dotted-path overrides.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cloud::{distribute, Model, RenderSettings, ScaleLayout, MAX_SCALES};
use crate::decode::Decoder;
use crate::error::{Error, Result};
use crate::factor_grid::TensorShape;
use crate::learn::TrainConfig;
use crate::real::{Aabb, Real};
use crate::render::OccupancyGrid;
use crate::scenes::CoarseConfig;

/// One tensor-cloud scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleSpec {
    pub spacing: f64,
    pub edge: f64,
    pub start_res: usize,
    pub end_res: usize,
    /// Neighbour count `M`.
    #[serde(alias = "M", default = "default_neighbors")]
    pub neighbors: usize,
}

fn default_neighbors() -> usize {
    4
}

/// Which image-quality metrics `eval` reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricFlags {
    pub psnr: bool,
    pub ssim: bool,
}

impl Default for MetricFlags {
    fn default() -> Self {
        Self {
            psnr: true,
            ssim: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scales: Vec<ScaleSpec>,
    pub density_rank: usize,
    pub appearance_rank: usize,
    /// Appearance feature dimension `P`.
    pub feature_dim: usize,
    pub n_freq: usize,
    pub hidden: usize,
    pub density_shift: f64,
    pub init_std: f64,
    /// Marching step; `None` uses the box diagonal / 512.
    pub step_size: Option<f64>,
    pub early_stop_transmittance: f64,
    pub color_weight_threshold: f64,
    pub background: [f64; 3],
    pub aabb: Aabb,
    pub seed: u64,
    pub train: TrainConfig,
    pub coarse: CoarseConfig,
    /// Skip empty space during training and rendering using the coarse grid.
    pub use_occupancy: bool,
    pub dataset: Option<PathBuf>,
    pub split: String,
    /// External geometry (point file or occupancy grid); skips the coarse pass.
    pub geometry: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub metrics: MetricFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scale = |spacing, edge, start_res, end_res| ScaleSpec {
            spacing,
            edge,
            start_res,
            end_res,
            neighbors: 4,
        };
        Self {
            scales: vec![
                scale(0.4, 0.6, 29, 121),
                scale(0.2, 0.3, 15, 61),
                scale(0.1, 0.15, 7, 31),
            ],
            density_rank: 16,
            appearance_rank: 48,
            feature_dim: 27,
            n_freq: 4,
            hidden: 128,
            density_shift: -10.0,
            init_std: 0.2,
            step_size: None,
            early_stop_transmittance: 1e-4,
            color_weight_threshold: 1e-4,
            background: [1.0; 3],
            aabb: Aabb::default(),
            seed: 0,
            train: TrainConfig::default(),
            coarse: CoarseConfig::default(),
            use_occupancy: true,
            dataset: None,
            split: "train".into(),
            geometry: None,
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every: 0,
            metrics: MetricFlags::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config always serializes")
    }

    /// Applies `key=value` overrides. Keys are dotted paths (`train.steps`,
    /// `scales[2].M`, `scales[*].neighbors`); values parse as JSON, falling
    /// back to a plain string. `scales=KofN` keeps the first `K` scales.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self).expect("config always serializes");
        for o in overrides {
            apply_override(&mut doc, o.as_ref())?;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.scales.is_empty() || self.scales.len() > MAX_SCALES {
            return bad(format!(
                "need 1..={MAX_SCALES} scales, got {}",
                self.scales.len()
            ));
        }
        for (i, s) in self.scales.iter().enumerate() {
            if !(s.spacing > 0.0) || !(s.edge > s.spacing) {
                return bad(format!("scales[{i}]: need 0 < spacing < edge"));
            }
            if s.start_res < 2 || s.end_res < s.start_res {
                return bad(format!("scales[{i}]: need 2 <= start_res <= end_res"));
            }
            if s.neighbors == 0 {
                return bad(format!("scales[{i}]: M must be at least 1"));
            }
        }
        if self.density_rank == 0
            || self.appearance_rank == 0
            || self.feature_dim == 0
            || self.hidden == 0
        {
            return bad("ranks, feature_dim and hidden must be positive".into());
        }
        if !(self.init_std >= 0.0) {
            return bad("init_std must be non-negative".into());
        }
        if self.step_size.is_some_and(|s| !(s > 0.0)) {
            return bad("step_size must be positive".into());
        }
        if (0..3).any(|a| !(self.aabb.max[a] > self.aabb.min[a])) {
            return bad("aabb must have positive extent".into());
        }
        self.train.validate()
    }

    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings {
            step_size: self.step_size.unwrap_or(self.aabb.diagonal() / 512.0),
            early_stop_transmittance: self.early_stop_transmittance,
            color_weight_threshold: self.color_weight_threshold,
        }
    }

    /// Training settings with per-scale resolutions and the run seed filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            resolutions: self
                .scales
                .iter()
                .map(|s| [s.start_res, s.end_res])
                .collect(),
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Distributes every scale's tensors around `points` and initializes the decoder.
    pub fn build_model<T: Real>(
        &self,
        points: &[[f64; 3]],
        occupancy: Option<OccupancyGrid>,
    ) -> Result<Model<T>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let scales = self
            .scales
            .iter()
            .map(|s| {
                let layout = ScaleLayout {
                    origin: self.aabb.min,
                    spacing: s.spacing,
                    edge: s.edge,
                    neighbors: s.neighbors,
                };
                let shape =
                    TensorShape::cubic(self.density_rank, self.appearance_rank, s.start_res)?;
                distribute(points, layout, shape, self.init_std, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = Decoder::random(
            self.scales.len(),
            self.feature_dim,
            self.appearance_rank,
            self.hidden,
            self.n_freq,
            self.density_shift,
            &mut rng,
        )?;
        let occupancy = if self.use_occupancy { occupancy } else { None };
        Model::new(
            scales,
            decoder,
            self.aabb,
            self.background,
            occupancy,
            self.render_settings(),
        )
    }
}

enum Segment {
    Key(String),
    Index(usize),
    All,
}

fn parse_path(path: &str) -> Result<Vec<Segment>> {
    let mut segs = Vec::new();
    for part in path.split('.') {
        let (name, rest) = match part.find('[') {
            Some(i) => (&part[..i], &part[i..]),
            None => (part, ""),
        };
        if name.is_empty() {
            return Err(Error::Config(format!(
                "override path `{path}` has an empty key"
            )));
        }
        segs.push(Segment::Key(if name == "M" {
            "neighbors".into()
        } else {
            name.into()
        }));
        let mut rest = rest;
        while let Some(stripped) = rest.strip_prefix('[') {
            let end = stripped
                .find(']')
                .ok_or_else(|| Error::Config(format!("unclosed `[` in `{path}`")))?;
            let idx = &stripped[..end];
            segs.push(if idx == "*" {
                Segment::All
            } else {
                Segment::Index(
                    idx.parse()
                        .map_err(|_| Error::Config(format!("bad index `{idx}` in `{path}`")))?,
                )
            });
            rest = &stripped[end + 1..];
        }
        if !rest.is_empty() {
            return Err(Error::Config(format!("unexpected `{rest}` in `{path}`")));
        }
    }
    Ok(segs)
}

fn set_path(node: &mut Value, segs: &[Segment], value: &Value, path: &str) -> Result<()> {
    let Some((head, tail)) = segs.split_first() else {
        *node = value.clone();
        return Ok(());
    };
    match head {
        Segment::Key(k) => {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("`{path}`: `{k}` is not inside an object")))?;
            if tail.is_empty() {
                obj.insert(k.clone(), value.clone());
                Ok(())
            } else {
                let child = obj
                    .get_mut(k)
                    .ok_or_else(|| Error::Config(format!("unknown field `{k}` in `{path}`")))?;
                set_path(child, tail, value, path)
            }
        }
        Segment::Index(i) => {
            let arr = node
                .as_array_mut()
                .ok_or_else(|| Error::Config(format!("`{path}`: not a list")))?;
            let len = arr.len();
            let child = arr.get_mut(*i).ok_or_else(|| {
                Error::Config(format!("`{path}`: index {i} out of range (len {len})"))
            })?;
            set_path(child, tail, value, path)
        }
        Segment::All => {
            let arr = node
                .as_array_mut()
                .ok_or_else(|| Error::Config(format!("`{path}`: not a list")))?;
            arr.iter_mut()
                .try_for_each(|child| set_path(child, tail, value, path))
        }
    }
}

fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` must look like key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key == "scales" {
        if let Some((k, n)) = raw.split_once("of") {
            let (k, n): (usize, usize) = (
                k.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad scale selection `{raw}`")))?,
                n.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad scale selection `{raw}`")))?,
            );
            let arr = doc["scales"].as_array_mut().expect("scales is a list");
            if n != arr.len() || k == 0 || k > n {
                return Err(Error::Config(format!(
                    "`scales={raw}`: config has {} scales",
                    arr.len()
                )));
            }
            arr.truncate(k);
            return Ok(());
        }
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    set_path(doc, &parse_path(key)?, &value, key)
}
