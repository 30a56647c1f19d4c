//! Sparse multi-scale radiance fields built from CP-factorized local tensors.

pub mod checkpoint;
pub mod cloud;
pub mod config;
pub mod decode;
pub mod error;
pub mod factor_grid;
pub mod learn;
pub mod pipeline;
pub mod real;
pub mod render;
pub mod scenes;

pub use cloud::{Model, RenderSettings, ScaleCloud, ScaleLayout};
pub use error::{Error, Result};
pub use real::{Aabb, Real, Vec3};
