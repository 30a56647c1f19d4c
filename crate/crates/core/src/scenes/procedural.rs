use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{quantize_8bit, SceneDataset};
use crate::error::{Error, Result};
use crate::real::Aabb;
use crate::render::{Camera, Image, Ray, View};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Sphere {
        radius: f64,
    },
    /// Axis-aligned box given by its half extents.
    Box {
        half: [f64; 3],
    },
}

/// A constant-density, constant-albedo solid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: [f64; 3],
    pub sigma: f64,
    pub albedo: [f64; 3],
}

impl Primitive {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let d: [f64; 3] = std::array::from_fn(|a| p[a] - self.center[a]);
        match self.shape {
            Shape::Sphere { radius } => d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= radius * radius,
            Shape::Box { half } => (0..3).all(|a| d[a].abs() <= half[a]),
        }
    }

    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let h = match self.shape {
            Shape::Sphere { radius } => [radius; 3],
            Shape::Box { half } => half,
        };
        (
            std::array::from_fn(|a| self.center[a] - h[a]),
            std::array::from_fn(|a| self.center[a] + h[a]),
        )
    }
}

/// Analytic density/albedo field used as ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProceduralScene {
    pub primitives: Vec<Primitive>,
    pub aabb: Aabb,
    pub background: [f64; 3],
}

impl ProceduralScene {
    pub fn new(primitives: Vec<Primitive>, aabb: Aabb, background: [f64; 3]) -> Result<Self> {
        for (i, p) in primitives.iter().enumerate() {
            let (lo, hi) = p.bounds();
            if !(p.sigma >= 0.0) {
                return Err(Error::invalid(format!(
                    "primitive {i}: density must be non-negative"
                )));
            }
            if !aabb.contains(lo) || !aabb.contains(hi) {
                return Err(Error::invalid(format!(
                    "primitive {i} extends outside the scene box"
                )));
            }
        }
        Ok(Self {
            primitives,
            aabb,
            background,
        })
    }

    /// Two boxes and a sphere with distinct colours inside `[-1, 1]³`.
    pub fn tiny() -> Self {
        let prims = vec![
            Primitive {
                shape: Shape::Box {
                    half: [0.35, 0.25, 0.2],
                },
                center: [-0.2, -0.15, -0.3],
                sigma: 60.0,
                albedo: [0.85, 0.25, 0.15],
            },
            Primitive {
                shape: Shape::Box {
                    half: [0.15, 0.3, 0.25],
                },
                center: [0.4, 0.3, 0.05],
                sigma: 60.0,
                albedo: [0.2, 0.6, 0.3],
            },
            Primitive {
                shape: Shape::Sphere { radius: 0.28 },
                center: [-0.05, 0.25, 0.3],
                sigma: 60.0,
                albedo: [0.2, 0.3, 0.85],
            },
        ];
        Self::new(prims, Aabb::default(), [1.0; 3]).expect("built-in scene is valid")
    }

    /// Summed density and density-weighted mean albedo at `p`.
    pub fn field(&self, p: [f64; 3]) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut rgb = [0.0; 3];
        for prim in &self.primitives {
            if prim.contains(p) {
                sigma += prim.sigma;
                for c in 0..3 {
                    rgb[c] += prim.sigma * prim.albedo[c];
                }
            }
        }
        if sigma > 0.0 {
            rgb = rgb.map(|c| c / sigma);
        }
        (sigma, rgb)
    }

    /// Marches one ray through the analytic field: midpoints of `step`
    /// intervals from near to far, composited term by term in 64-bit.
    pub fn trace(&self, ray: &Ray<f64>, step: f64) -> [f64; 3] {
        let mut trans = 1.0;
        let mut rgb = [0.0; 3];
        if ray.hit {
            let mut t0 = ray.near;
            while t0 < ray.far {
                let t1 = (t0 + step).min(ray.far);
                let tm = 0.5 * (t0 + t1);
                let p = [0, 1, 2].map(|a| ray.origin[a] + tm * ray.dir[a]);
                let (sigma, c) = self.field(p);
                if sigma > 0.0 {
                    let alpha = 1.0 - (-sigma * (t1 - t0)).exp();
                    for k in 0..3 {
                        rgb[k] += trans * alpha * c[k];
                    }
                    trans *= 1.0 - alpha;
                }
                t0 = t1;
            }
        }
        [0, 1, 2].map(|k| rgb[k] + trans * self.background[k])
    }
}

/// Ground-truth image of `scene` from `camera`.
pub fn oracle_render(scene: &ProceduralScene, camera: &Camera, step: f64) -> Result<Image> {
    if !(step > 0.0) {
        return Err(Error::invalid("oracle step must be positive"));
    }
    let w = camera.width;
    let rows: Vec<Vec<f32>> = (0..camera.height)
        .into_par_iter()
        .map(|row| {
            (0..w)
                .flat_map(|col| {
                    scene
                        .trace(&camera.ray::<f64>(row, col, &scene.aabb), step)
                        .map(|v| v as f32)
                })
                .collect()
        })
        .collect();
    Image::from_data(w, camera.height, rows.concat())
}

/// Camera-to-world pose at `position` looking at `target`, with `up` as the
/// approximate vertical.
pub fn look_at(position: [f64; 3], target: [f64; 3], up: [f64; 3]) -> [[f64; 4]; 4] {
    let norm = |v: [f64; 3]| {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        v.map(|x| x / n)
    };
    let cross = |a: [f64; 3], b: [f64; 3]| {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    };
    let fwd = norm([0, 1, 2].map(|a| target[a] - position[a]));
    let mut right = cross(fwd, up);
    if right.iter().map(|x| x * x).sum::<f64>() < 1e-12 {
        right = cross(fwd, [0.0, 1.0, 0.0]);
    }
    let right = norm(right);
    let cam_up = cross(right, fwd);
    let mut m = [[0.0; 4]; 4];
    for a in 0..3 {
        m[a] = [right[a], cam_up[a], -fwd[a], position[a]];
    }
    m[3] = [0.0, 0.0, 0.0, 1.0];
    m
}

/// `n_views` cameras on a sphere of `radius` around the origin along a
/// Fibonacci spiral (rotated by a seed-dependent azimuth), each rendered with
/// [`oracle_render`] and quantized to 8 bits.
pub fn generate_dataset(
    scene: &ProceduralScene,
    n_views: usize,
    resolution: usize,
    radius: f64,
    camera_angle_x: f64,
    seed: u64,
    split: &str,
) -> Result<SceneDataset> {
    if n_views == 0 || resolution == 0 {
        return Err(Error::invalid(
            "need at least one view and a non-zero resolution",
        ));
    }
    if !(radius > 0.0) || !(camera_angle_x > 0.0 && camera_angle_x < std::f64::consts::PI) {
        return Err(Error::invalid(
            "radius must be positive and the view angle within (0, π)",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let focal = 0.5 * resolution as f64 / (0.5 * camera_angle_x).tan();
    let step = scene.aabb.diagonal() / 512.0;
    let mut views = Vec::with_capacity(n_views);
    for i in 0..n_views {
        // Heights span most of the sphere but avoid the poles.
        let z = 0.9 - 1.6 * (i as f64 + 0.5) / n_views as f64;
        let r = (1.0 - z * z).sqrt();
        let phi = phase + golden * i as f64;
        let pos = [radius * r * phi.cos(), radius * r * phi.sin(), radius * z];
        let camera = Camera::new(
            resolution,
            resolution,
            focal,
            look_at(pos, [0.0; 3], [0.0, 0.0, 1.0]),
        )?;
        let img = oracle_render(scene, &camera, step)?;
        let data = img
            .data()
            .iter()
            .map(|&v| quantize_8bit(v as f64))
            .collect();
        views.push(View {
            camera,
            image: Image::from_data(resolution, resolution, data)?,
        });
    }
    Ok(SceneDataset {
        views,
        split: split.to_string(),
        aabb: scene.aabb,
        background: scene.background,
    })
}
