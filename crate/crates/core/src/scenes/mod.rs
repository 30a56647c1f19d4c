//! Datasets, the procedural ground-truth scene, coarse occupancy
//! estimation and image metrics.

mod blender;
mod coarse;
mod geometry_io;
mod metrics;
mod procedural;

pub use blender::{load_nerf_synthetic, write_nerf_synthetic};
pub use coarse::{coarse_occupancy, fill_enclosed, CoarseConfig, CoarseResult};
pub use geometry_io::{
    load_geometry, read_occupancy, read_points, write_occupancy, write_points, write_tensor_points,
    Geometry,
};
pub use metrics::{psnr, ssim};
pub use procedural::{generate_dataset, look_at, oracle_render, Primitive, ProceduralScene, Shape};

use crate::real::Aabb;
use crate::render::View;

/// Posed images of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub views: Vec<View>,
    pub split: String,
    pub aabb: Aabb,
    pub background: [f64; 3],
}

impl SceneDataset {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

/// Rounds to the nearest 8-bit level, as stored in a PNG.
pub fn quantize_8bit(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}
