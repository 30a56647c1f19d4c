use crate::decode::Decoder;
use crate::error::{Error, Result};
use crate::real::{Aabb, Real, Vec3};
use crate::render::OccupancyGrid;

use super::{Neighbors, ScaleCloud};

pub const MAX_SCALES: usize = 8;

/// Ray-marching settings carried with a model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    /// Marching step `δ` in scene units.
    pub step_size: f64,
    /// Rays stop once transmittance falls below this.
    pub early_stop_transmittance: f64,
    /// Samples whose compositing weight is below this skip colour decoding.
    pub color_weight_threshold: f64,
}

impl RenderSettings {
    pub fn for_aabb(aabb: &Aabb) -> Self {
        Self {
            step_size: aabb.diagonal() / 512.0,
            early_stop_transmittance: 1e-4,
            color_weight_threshold: 1e-4,
        }
    }

    /// No early termination and no colour skipping: the exact discretized integral.
    pub fn exact(step_size: f64) -> Self {
        Self {
            step_size,
            early_stop_transmittance: 0.0,
            color_weight_threshold: 0.0,
        }
    }
}

/// Features aggregated over all scales covering a point.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiscaleFeatures<T> {
    pub f_sigma: T,
    pub f_color: Vec<T>,
    pub n_covering: usize,
}

/// Parameter counts by group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub tensors_per_scale: Vec<usize>,
    pub vectors_per_scale: Vec<usize>,
    pub appearance_matrices: usize,
    pub mlp: usize,
}

impl ParamReport {
    pub fn vectors(&self) -> usize {
        self.vectors_per_scale.iter().sum()
    }

    pub fn total(&self) -> usize {
        self.vectors() + self.appearance_matrices + self.mlp
    }
}

/// The full trainable radiance field.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub scales: Vec<ScaleCloud<T>>,
    pub decoder: Decoder<T>,
    pub aabb: Aabb,
    pub background: [f64; 3],
    /// Empty-space skipping grid; `None` marches every sample.
    pub occupancy: Option<OccupancyGrid>,
    pub settings: RenderSettings,
}

impl<T: Real> Model<T> {
    pub fn new(
        scales: Vec<ScaleCloud<T>>,
        decoder: Decoder<T>,
        aabb: Aabb,
        background: [f64; 3],
        occupancy: Option<OccupancyGrid>,
        settings: RenderSettings,
    ) -> Result<Self> {
        let model = Self {
            scales,
            decoder,
            aabb,
            background,
            occupancy,
            settings,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.len() > MAX_SCALES {
            return Err(Error::invalid(format!(
                "model needs 1..={MAX_SCALES} scales, got {}",
                self.scales.len()
            )));
        }
        if self.decoder.appearance.len() != self.scales.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} appearance matrices for {} scales",
                self.decoder.appearance.len(),
                self.scales.len()
            )));
        }
        let p = self.decoder.feature_dim();
        for (s, (cloud, b)) in self.scales.iter().zip(&self.decoder.appearance).enumerate() {
            if b.rows() != p || b.cols() != cloud.shape().appearance_rank {
                return Err(Error::DimensionMismatch(format!(
                    "scale {s}: appearance matrix is {}x{}, expected {p}x{}",
                    b.rows(),
                    b.cols(),
                    cloud.shape().appearance_rank
                )));
            }
        }
        if !(self.settings.step_size > 0.0) {
            return Err(Error::invalid("step size must be positive"));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.decoder.feature_dim()
    }

    /// Unweighted mean over covering scales of the per-scale density feature
    /// and appearance feature `B_s · (Σ_m w_m A_m)`.
    pub fn aggregate_multiscale(&self, p: Vec3<T>) -> MultiscaleFeatures<T> {
        let dim = self.feature_dim();
        let mut f_color = vec![T::zero(); dim];
        let mut f_sigma = T::zero();
        let mut n_covering = 0;
        let mut neighbors = Neighbors::new();
        let mut projected = vec![T::zero(); dim];
        for (cloud, b) in self.scales.iter().zip(&self.decoder.appearance) {
            cloud.query_into(p, cloud.neighbors(), &mut neighbors);
            if neighbors.is_empty() {
                continue;
            }
            let mut comps = vec![T::zero(); cloud.shape().appearance_rank];
            f_sigma += cloud.accumulate(p, &neighbors, Some(&mut comps));
            b.apply_into(&comps, &mut projected);
            for (f, v) in f_color.iter_mut().zip(&projected) {
                *f += *v;
            }
            n_covering += 1;
        }
        if n_covering > 0 {
            let inv = T::one() / T::from_count(n_covering);
            f_sigma *= inv;
            for f in &mut f_color {
                *f *= inv;
            }
        }
        MultiscaleFeatures {
            f_sigma,
            f_color,
            n_covering,
        }
    }

    /// Total number of density factor entries (the L1 normalizer `N`).
    pub fn density_entry_count(&self) -> usize {
        self.scales
            .iter()
            .map(|c| c.len() * c.shape().density_len())
            .sum()
    }

    pub fn param_report(&self) -> ParamReport {
        ParamReport {
            tensors_per_scale: self.scales.iter().map(ScaleCloud::len).collect(),
            vectors_per_scale: self.scales.iter().map(ScaleCloud::param_count).collect(),
            appearance_matrices: self.decoder.appearance_param_count(),
            mlp: self.decoder.mlp.param_count(),
        }
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            scales: self.scales.iter().map(ScaleCloud::cast).collect(),
            decoder: self.decoder.cast(),
            aabb: self.aabb,
            background: self.background,
            occupancy: self.occupancy.clone(),
            settings: self.settings,
        }
    }
}
