//! Fixtures and independent reference implementations shared by the
//! integration tests. The oracles deliberately avoid the library's own
//! helpers so that agreement means something.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trivec_core::cloud::{ScaleCloud, ScaleLayout};
use trivec_core::config::RunConfig;
use trivec_core::decode::{AppearanceMatrix, Decoder};
use trivec_core::factor_grid::{TensorShape, TriVectorTensor};
use trivec_core::render::Image;
use trivec_core::scenes::{generate_dataset, ProceduralScene, SceneDataset};
use trivec_core::{Aabb, Model, RenderSettings, Vec3};

/// The shipped tiny-scene configuration.
pub fn tiny_config() -> RunConfig {
    RunConfig::from_json(include_str!("../../../../configs/tiny.json"))
        .expect("configs/tiny.json is valid")
}

/// 24 views of the built-in procedural scene at 96×96.
pub fn tiny_dataset() -> SceneDataset {
    generate_dataset(&ProceduralScene::tiny(), 24, 96, 4.0, 0.6911112, 7, "train")
        .expect("tiny dataset")
}

/// A tensor with every factor drawn uniformly from [−1, 1].
pub fn random_tensor(
    rng: &mut impl Rng,
    density_rank: usize,
    appearance_rank: usize,
    res: [usize; 3],
    center: [f64; 3],
    edge: f64,
) -> TriVectorTensor<f64> {
    let shape = TensorShape::new(density_rank, appearance_rank, res).unwrap();
    let factors = (0..shape.param_count())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    TriVectorTensor::from_flat(Vec3::from_f64(center), edge, shape, factors).unwrap()
}

/// Materializes `Σ_r X_r ⊗ Y_r ⊗ Z_r` as a dense grid indexed `(i·J + j)·K + k`.
pub fn dense_grid(components: &[[&[f64]; 3]], res: [usize; 3]) -> Vec<f64> {
    let [ni, nj, nk] = res;
    let mut grid = vec![0.0; ni * nj * nk];
    for [x, y, z] in components {
        for i in 0..ni {
            for j in 0..nj {
                for k in 0..nk {
                    grid[(i * nj + j) * nk + k] += x[i] * y[j] * z[k];
                }
            }
        }
    }
    grid
}

/// Trilinear interpolation of a dense grid at continuous grid coordinates,
/// clamped to the grid.
pub fn trilinear(grid: &[f64], res: [usize; 3], g: [f64; 3]) -> f64 {
    let mut lo = [0usize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let n = res[a];
        let c = g[a].clamp(0.0, (n - 1) as f64);
        let i = (c.floor() as usize).min(n.saturating_sub(2));
        lo[a] = i;
        frac[a] = if n == 1 { 0.0 } else { c - i as f64 };
    }
    let mut sum = 0.0;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let up = (corner >> a) & 1 == 1;
            w *= if up { frac[a] } else { 1.0 - frac[a] };
            idx[a] = (lo[a] + up as usize).min(res[a] - 1);
        }
        sum += w * grid[(idx[0] * res[1] + idx[1]) * res[2] + idx[2]];
    }
    sum
}

/// Node-centred grid coordinates: the cuboid's faces map to 0 and `n − 1`.
pub fn grid_coord(center: [f64; 3], edge: f64, res: [usize; 3], p: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|a| (p[a] - (center[a] - 0.5 * edge)) / edge * (res[a] - 1) as f64)
}

/// Density feature of `t` at `p` through the dense grid.
pub fn dense_density(t: &TriVectorTensor<f64>, p: [f64; 3]) -> f64 {
    let shape = t.shape();
    let comps: Vec<[&[f64]; 3]> = (0..shape.density_rank)
        .map(|r| t.density_component(r))
        .collect();
    let grid = dense_grid(&comps, shape.res);
    trilinear(
        &grid,
        shape.res,
        grid_coord(t.position().to_f64(), t.edge(), shape.res, p),
    )
}

/// Appearance component activations of `t` at `p` through one dense grid per component.
pub fn dense_appearance(t: &TriVectorTensor<f64>, p: [f64; 3]) -> Vec<f64> {
    let shape = t.shape();
    let g = grid_coord(t.position().to_f64(), t.edge(), shape.res, p);
    (0..shape.appearance_rank)
        .map(|r| {
            trilinear(
                &dense_grid(&[t.appearance_component(r)], shape.res),
                shape.res,
                g,
            )
        })
        .collect()
}

/// Literal discretized volume rendering in 64-bit: every transmittance is
/// recomputed from scratch as `exp(−Σ_{j<q} σ_j δ_j)`. Returns the pixel,
/// the final transmittance and the per-sample weights.
pub fn literal_composite(
    sigmas: &[f64],
    colors: &[[f64; 3]],
    deltas: &[f64],
    background: [f64; 3],
) -> ([f64; 3], f64, Vec<f64>) {
    let n = sigmas.len();
    let mut pixel = [0.0; 3];
    let mut weights = Vec::with_capacity(n);
    for q in 0..n {
        let optical: f64 = (0..q).map(|j| sigmas[j] * deltas[j]).sum();
        let w = (-optical).exp() * (1.0 - (-sigmas[q] * deltas[q]).exp());
        weights.push(w);
        for c in 0..3 {
            pixel[c] += w * colors[q][c];
        }
    }
    let t_final = (-(0..n).map(|j| sigmas[j] * deltas[j]).sum::<f64>()).exp();
    for c in 0..3 {
        pixel[c] += t_final * background[c];
    }
    (pixel, t_final, weights)
}

/// Covering tensors of `p` (centre within half an edge on every axis), the
/// `m` nearest by Euclidean distance, weighted by normalized inverse distance.
pub fn brute_force_neighbors(cloud: &ScaleCloud<f64>, p: [f64; 3], m: usize) -> Vec<(usize, f64)> {
    let mut cands: Vec<(usize, f64)> = cloud
        .tensors()
        .iter()
        .enumerate()
        .filter_map(|(i, t)| {
            let c = t.position().to_f64();
            let half = 0.5 * t.edge();
            if (0..3).all(|a| (p[a] - c[a]).abs() <= half) {
                let d = ((0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>()).sqrt();
                Some((i, d))
            } else {
                None
            }
        })
        .collect();
    cands.sort_by(|a, b| a.1.total_cmp(&b.1));
    cands.truncate(m);
    let inv: Vec<f64> = cands.iter().map(|&(_, d)| 1.0 / d.max(1e-6)).collect();
    let total: f64 = inv.iter().sum();
    cands
        .iter()
        .zip(&inv)
        .map(|(&(i, _), &w)| (i, w / total))
        .collect()
}

/// Appearance feature by applying `B` to each neighbour's components first
/// and weighting afterwards.
pub fn per_tensor_then_weight(
    b: &AppearanceMatrix<f64>,
    cloud: &ScaleCloud<f64>,
    p: [f64; 3],
    m: usize,
) -> Vec<f64> {
    let (rows, cols) = (b.rows(), b.cols());
    let mut out = vec![0.0; rows];
    for (i, w) in brute_force_neighbors(cloud, p, m) {
        let comps = dense_appearance(&cloud.tensors()[i], p);
        for r in 0..rows {
            let mut v = 0.0;
            for c in 0..cols {
                v += b.entries()[r * cols + c] * comps[c];
            }
            out[r] += w * v;
        }
    }
    out
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let mut w = Vec::with_capacity(size * size);
    for a in &g {
        for b in &g {
            w.push(a * b);
        }
    }
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

/// SSIM evaluated window by window: 11×11 Gaussian (σ = 1.5) over every
/// fully inside position, per channel, averaged.
pub fn naive_ssim(a: &Image, b: &Image) -> f64 {
    let (w, h) = (a.width(), a.height());
    let size = 11;
    assert!(
        w >= size && h >= size,
        "naive SSIM needs images of at least 11×11"
    );
    let win = gaussian_window(size, 1.5);
    let (c1, c2) = ((0.01f64).powi(2), (0.03f64).powi(2));
    let mut total = 0.0;
    for ch in 0..3 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for r0 in 0..=h - size {
            for c0 in 0..=w - size {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..size {
                    for j in 0..size {
                        let k = win[i * size + j];
                        mx += k * a.get(r0 + i, c0 + j)[ch] as f64;
                        my += k * b.get(r0 + i, c0 + j)[ch] as f64;
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in 0..size {
                    for j in 0..size {
                        let k = win[i * size + j];
                        let dx = a.get(r0 + i, c0 + j)[ch] as f64 - mx;
                        let dy = b.get(r0 + i, c0 + j)[ch] as f64 - my;
                        vx += k * dx * dx;
                        vy += k * dy * dy;
                        cxy += k * dx * dy;
                    }
                }
                sum += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total += sum / count as f64;
    }
    total / 3.0
}

/// One cube-shaped tensor per cell with constant factor vectors, so the
/// density feature is `value` exactly inside each cube and nothing
/// outside; the decoder is irrelevant in bypass shading.
pub fn constant_cube_model(
    layout: ScaleLayout,
    cells: &[[i32; 3]],
    value: f64,
    res: usize,
) -> Model<f64> {
    let c = value.cbrt();
    let shape = TensorShape::cubic(1, 1, res).unwrap();
    let tensors = cells
        .iter()
        .map(|&cell| {
            let center = Vec3::from_f64(layout.cell_center(cell));
            TriVectorTensor::from_flat(center, layout.edge, shape, vec![c; shape.param_count()])
                .unwrap()
        })
        .collect();
    let cloud = ScaleCloud::from_parts(layout, cells.to_vec(), tensors).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let decoder = Decoder::random(1, 2, 1, 4, 0, 0.0, &mut rng).unwrap();
    Model::new(
        vec![cloud],
        decoder,
        Aabb::default(),
        [1.0; 3],
        None,
        RenderSettings::exact(Aabb::default().diagonal() / 512.0),
    )
    .unwrap()
}
