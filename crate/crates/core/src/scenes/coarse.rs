use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SceneDataset;
use crate::decode::{sigmoid, softplus};
use crate::error::{Error, Result};
use crate::learn::{adam_step, AdamParams};
use crate::real::Vec3;
use crate::render::{sample_ray, OccupancyGrid, Sample};

/// Settings of the coarse dense-grid pass that prunes empty space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoarseConfig {
    pub resolution: usize,
    pub steps: usize,
    pub batch_rays: usize,
    pub lr: f64,
    /// Adam ε. Far below the usual 1e-8 because density gradients under a
    /// strongly negative shift start out near 1e-10.
    pub adam_eps: f64,
    /// Per channel group (density, colour), Adam's ε is raised to this
    /// fraction of the largest gradient RMS in the group.
    pub relative_eps: f64,
    /// Voxels with `1 − exp(−σ · voxel_size)` above this are occupied.
    pub alpha_threshold: f64,
    pub dilation: usize,
    /// Mark empty voxels unreachable from the grid boundary as occupied.
    pub fill_enclosed: bool,
    pub density_shift: f64,
    /// Weight of the per-sample colour term `Σ_q w_q ‖c_q − C‖²`, which
    /// penalizes density wherever a sample's colour disagrees with the pixel.
    pub sample_color_weight: f64,
    /// Marching step; `None` uses half a voxel.
    pub step_size: Option<f64>,
}

impl Default for CoarseConfig {
    fn default() -> Self {
        Self {
            resolution: 100,
            steps: 1000,
            batch_rays: 4096,
            lr: 0.1,
            adam_eps: 1e-15,
            relative_eps: 1e-3,
            alpha_threshold: 1e-3,
            dilation: 1,
            fill_enclosed: true,
            density_shift: -10.0,
            sample_color_weight: 5.0,
            step_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoarseResult {
    pub occupancy: OccupancyGrid,
    pub points: Vec<[f64; 3]>,
    /// Voxels above threshold before dilation and filling.
    pub raw_count: usize,
}

/// Cell-centred dense grid with one density and three colour channels.
struct DenseGrid {
    n: usize,
    min: [f64; 3],
    inv_voxel: [f64; 3],
    /// Channel-major: `[density | r | g | b]`, each `n³`.
    values: Vec<f64>,
}

struct Corners {
    idx: [usize; 8],
    w: [f64; 8],
}

impl DenseGrid {
    fn corners(&self, p: Vec3<f64>) -> Corners {
        let n = self.n;
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let g = ((p[a] - self.min[a]) * self.inv_voxel[a] - 0.5).clamp(0.0, (n - 1) as f64);
            let i = (g.floor() as usize).min(n.saturating_sub(2));
            base[a] = i;
            frac[a] = if n > 1 { g - i as f64 } else { 0.0 };
        }
        let mut c = Corners {
            idx: [0; 8],
            w: [0.0; 8],
        };
        for k in 0..8 {
            let (dx, dy, dz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
            let at = |a: usize, d: usize| (base[a] + d).min(n - 1);
            c.idx[k] = at(0, dx) + n * (at(1, dy) + n * at(2, dz));
            let f = |a: usize, d: usize| if d == 1 { frac[a] } else { 1.0 - frac[a] };
            c.w[k] = f(0, dx) * f(1, dy) * f(2, dz);
        }
        c
    }

    fn lookup(&self, c: &Corners) -> [f64; 4] {
        let n3 = self.n.pow(3);
        std::array::from_fn(|ch| {
            (0..8)
                .map(|k| c.w[k] * self.values[ch * n3 + c.idx[k]])
                .sum()
        })
    }
}

struct SampleRec {
    corners: Corners,
    raw: f64,
    delta: f64,
    weight: f64,
    trans_after: f64,
    color: [f64; 3],
}

/// Fits a dense grid to `dataset` with the emission–absorption renderer and
/// an L2 loss, then thresholds per-voxel alpha, dilates, and returns the
/// occupied voxel centres as geometry.
pub fn coarse_occupancy(
    dataset: &SceneDataset,
    config: &CoarseConfig,
    seed: u64,
) -> Result<CoarseResult> {
    let n = config.resolution;
    if n < 2 || config.batch_rays == 0 {
        return Err(Error::Config(
            "coarse resolution must be >= 2 and batch_rays positive".into(),
        ));
    }
    if dataset.views.is_empty() {
        return Err(Error::invalid("coarse occupancy needs at least one view"));
    }
    let aabb = dataset.aabb;
    let voxel: [f64; 3] = std::array::from_fn(|a| (aabb.max[a] - aabb.min[a]) / n as f64);
    let mut grid = DenseGrid {
        n,
        min: aabb.min,
        inv_voxel: voxel.map(|v| 1.0 / v),
        values: vec![0.0; 4 * n.pow(3)],
    };
    let step = config
        .step_size
        .unwrap_or(0.5 * voxel.iter().cloned().fold(f64::INFINITY, f64::min));
    let shift = config.density_shift;
    let bg = dataset.background;
    let n3 = n.pow(3);

    let mut grads = vec![0.0; grid.values.len()];
    let mut m = vec![0.0; grid.values.len()];
    let mut v = vec![0.0; grid.values.len()];
    let mut samples: Vec<Sample<f64>> = Vec::new();
    let mut recs: Vec<SampleRec> = Vec::new();
    let pixels_per_view = dataset.views[0].image.pixel_count();
    if dataset
        .views
        .iter()
        .any(|v| v.image.pixel_count() != pixels_per_view)
    {
        return Err(Error::DimensionMismatch(
            "views differ in resolution".into(),
        ));
    }
    let total = pixels_per_view * dataset.views.len();
    let hp = AdamParams {
        eps: config.adam_eps,
        ..AdamParams::default()
    };

    for it in 0..config.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0a5_5e00);
        rng.set_stream(it as u64);
        grads.fill(0.0);
        for _ in 0..config.batch_rays {
            let idx = rng.random_range(0..total);
            let view = &dataset.views[idx / pixels_per_view];
            let local = idx % pixels_per_view;
            let (row, col) = (local / view.image.width(), local % view.image.width());
            let ray = view.camera.ray::<f64>(row, col, &aabb);
            let offset = rng.random::<f64>();
            sample_ray(&ray, None, step, None, &mut samples);
            recs.clear();
            let mut trans = 1.0;
            for s in &samples {
                // Jitter the whole ray by a common sub-step offset.
                let pos = s.position + ray.dir * ((offset - 0.5) * s.delta);
                let corners = grid.corners(pos);
                let vals = grid.lookup(&corners);
                let sigma = softplus(vals[0] + shift);
                let decay = (-sigma * s.delta).exp();
                let weight = trans * (1.0 - decay);
                trans *= decay;
                let color = [sigmoid(vals[1]), sigmoid(vals[2]), sigmoid(vals[3])];
                recs.push(SampleRec {
                    corners,
                    raw: vals[0],
                    delta: s.delta,
                    weight,
                    trans_after: trans,
                    color,
                });
                if trans < 1e-4 {
                    break;
                }
            }
            let mut pred = bg.map(|b| b * trans);
            for r in &recs {
                for c in 0..3 {
                    pred[c] += r.weight * r.color[c];
                }
            }
            let truth = view.image.get(row, col);
            let g: [f64; 3] = std::array::from_fn(|c| {
                2.0 * (pred[c] - truth[c] as f64) / config.batch_rays as f64
            });
            let dot = |c: &[f64; 3]| c[0] * g[0] + c[1] * g[1] + c[2] * g[2];
            let pw = config.sample_color_weight / config.batch_rays as f64;
            let mut suffix = trans * dot(&bg);
            for r in recs.iter().rev() {
                // The per-sample term composites `‖c_q − C‖²` with no background.
                let diff: [f64; 3] = std::array::from_fn(|c| r.color[c] - truth[c] as f64);
                let err = pw * (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]);
                let cg = dot(&r.color) + err;
                let d_sigma = r.delta * (r.trans_after * cg - suffix);
                suffix += r.weight * cg;
                let d_raw = d_sigma * sigmoid(r.raw + shift);
                let d_logit: [f64; 3] = std::array::from_fn(|c| {
                    (g[c] + 2.0 * pw * diff[c]) * r.weight * r.color[c] * (1.0 - r.color[c])
                });
                for k in 0..8 {
                    let (i, w) = (r.corners.idx[k], r.corners.w[k]);
                    grads[i] += w * d_raw;
                    for c in 0..3 {
                        grads[(c + 1) * n3 + i] += w * d_logit[c];
                    }
                }
            }
        }
        let t = it as u64 + 1;
        for range in [0..n3, n3..4 * n3] {
            let c2 = 1.0 / (1.0 - hp.beta2.powf(t as f64));
            let v_max = v[range.clone()]
                .iter()
                .zip(&grads[range.clone()])
                .fold(0.0f64, |acc, (&v, &g)| {
                    acc.max(hp.beta2 * v + (1.0 - hp.beta2) * g * g)
                });
            let eps = config
                .adam_eps
                .max(config.relative_eps * (v_max * c2).sqrt());
            let hp = AdamParams { eps, ..hp };
            adam_step(
                &mut grid.values[range.clone()],
                &grads[range.clone()],
                &mut m[range.clone()],
                &mut v[range.clone()],
                config.lr,
                hp,
                t,
            );
        }
    }

    let min_voxel = voxel.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut occ = OccupancyGrid::empty(n, aabb);
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let sigma = softplus(grid.values[i + n * (j + n * k)] + shift);
                if 1.0 - (-sigma * min_voxel).exp() > config.alpha_threshold {
                    occ.set([i, j, k], true);
                }
            }
        }
    }
    let raw_count = occ.count();
    if raw_count == 0 {
        return Err(Error::EmptyOccupancy {
            threshold: config.alpha_threshold,
        });
    }
    let mut occ = occ.dilate(config.dilation);
    if config.fill_enclosed {
        occ = fill_enclosed(&occ);
    }
    let points = occ.occupied_centers();
    Ok(CoarseResult {
        occupancy: occ,
        points,
        raw_count,
    })
}

/// Marks every empty voxel not 6-connected to the grid boundary through
/// empty voxels as occupied (solid interiors hidden from all views).
pub fn fill_enclosed(grid: &OccupancyGrid) -> OccupancyGrid {
    let n = grid.resolution();
    let flat = |i: usize, j: usize, k: usize| i + n * (j + n * k);
    let mut outside = vec![false; n.pow(3)];
    let mut queue = VecDeque::new();
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let border = [i, j, k].iter().any(|&c| c == 0 || c == n - 1);
                if border && !grid.get([i, j, k]) {
                    outside[flat(i, j, k)] = true;
                    queue.push_back([i, j, k]);
                }
            }
        }
    }
    while let Some([i, j, k]) = queue.pop_front() {
        let steps: [(isize, isize, isize); 6] = [
            (1, 0, 0),
            (-1, 0, 0),
            (0, 1, 0),
            (0, -1, 0),
            (0, 0, 1),
            (0, 0, -1),
        ];
        for (di, dj, dk) in steps {
            let (x, y, z) = (i as isize + di, j as isize + dj, k as isize + dk);
            if [x, y, z].iter().any(|&c| c < 0 || c >= n as isize) {
                continue;
            }
            let (x, y, z) = (x as usize, y as usize, z as usize);
            if !outside[flat(x, y, z)] && !grid.get([x, y, z]) {
                outside[flat(x, y, z)] = true;
                queue.push_back([x, y, z]);
            }
        }
    }
    let voxels = (0..n.pow(3))
        .map(|f| grid.voxels()[f] || !outside[f])
        .collect();
    OccupancyGrid::from_voxels(n, *grid.aabb(), voxels).expect("same resolution")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::real::Aabb;
    use crate::render::{Camera, Image, View};
    use crate::scenes::look_at;

    #[test]
    fn background_only_dataset_is_empty() {
        let cam = Camera::new(
            8,
            8,
            8.0,
            look_at([0.0, -3.0, 0.0], [0.0; 3], [0.0, 0.0, 1.0]),
        )
        .unwrap();
        let ds = SceneDataset {
            views: vec![View {
                camera: cam,
                image: Image::filled(8, 8, [1.0; 3]),
            }],
            split: "train".into(),
            aabb: Aabb::default(),
            background: [1.0; 3],
        };
        let cfg = CoarseConfig {
            resolution: 8,
            steps: 20,
            batch_rays: 32,
            ..Default::default()
        };
        assert!(matches!(
            coarse_occupancy(&ds, &cfg, 0),
            Err(Error::EmptyOccupancy { .. })
        ));
    }

    #[test]
    fn enclosed_cavity_is_filled() {
        let mut g = OccupancyGrid::empty(5, Aabb::default());
        for k in 1..4 {
            for j in 1..4 {
                for i in 1..4 {
                    if [i, j, k] != [2, 2, 2] {
                        g.set([i, j, k], true);
                    }
                }
            }
        }
        let f = fill_enclosed(&g);
        assert!(f.get([2, 2, 2]));
        assert_eq!(f.count(), 27);
    }
}
