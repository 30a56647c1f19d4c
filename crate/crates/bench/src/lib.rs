//! Fixtures shared by the benchmarks: a small scene, its views and a model
//! placed on the scene's analytic geometry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trivec_core::config::RunConfig;
use trivec_core::factor_grid::{TensorShape, TriVectorTensor};
use trivec_core::render::View;
use trivec_core::scenes::{generate_dataset, ProceduralScene};
use trivec_core::{Model, Vec3};

/// A tensor of the given ranks and cubic resolution with random factors.
pub fn random_tensor(
    density_rank: usize,
    appearance_rank: usize,
    res: usize,
) -> TriVectorTensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shape = TensorShape::cubic(density_rank, appearance_rank, res).expect("valid shape");
    let factors = (0..shape.param_count())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    TriVectorTensor::from_flat(Vec3::new(0.0, 0.0, 0.0), 0.6, shape, factors).expect("valid tensor")
}

/// Two-scale configuration at the resolutions the tiny scene starts with.
pub fn config() -> RunConfig {
    let mut config = RunConfig::default();
    config.scales.truncate(2);
    for s in &mut config.scales {
        s.start_res = 11;
        s.end_res = 11;
    }
    config.appearance_rank = 24;
    config.hidden = 64;
    config.train.batch_rays = 1024;
    config.train.upsample_steps.clear();
    config
}

/// 8 views at 64×64 of the built-in scene and an untrained model whose
/// tensors sit on the scene's analytic occupancy (24³ lattice).
pub fn scene() -> (RunConfig, Vec<View>, Model<f32>) {
    let scene = ProceduralScene::tiny();
    let data = generate_dataset(&scene, 8, 64, 4.0, 0.6911112, 3, "train").expect("dataset");
    let config = config();
    let n = 24;
    let points: Vec<[f64; 3]> = (0..n * n * n)
        .map(|i| {
            [i % n, (i / n) % n, i / (n * n)].map(|v| -1.0 + (v as f64 + 0.5) * 2.0 / n as f64)
        })
        .filter(|&p| scene.field(p).0 > 0.0)
        .collect();
    let model = config.build_model::<f32>(&points, None).expect("model");
    (config, data.views, model)
}
