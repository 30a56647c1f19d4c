use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;
use trivec_bench::{random_tensor, scene};
use trivec_core::learn::Trainer;
use trivec_core::render::render_image;
use trivec_core::Vec3;

fn tensor_eval(c: &mut Criterion) {
    let t = random_tensor(16, 48, 29);
    let p = Vec3::new(0.11f32, -0.07, 0.2);
    c.bench_function("tensor/density_feature", |b| {
        b.iter(|| black_box(&t).eval_density_feature(black_box(p)))
    });
    c.bench_function("tensor/appearance_components", |b| {
        b.iter(|| black_box(&t).eval_appearance_components(black_box(p)))
    });
}

fn ray_trace(c: &mut Criterion) {
    let (_, views, model) = scene();
    let camera = views[0].camera.clone();
    let mut group = c.benchmark_group("render");
    group.sample_size(10);
    group.bench_function("image_64x64", |b| {
        b.iter(|| render_image(&model, black_box(&camera)))
    });
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let (config, views, model) = scene();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("step_1024_rays", |b| {
        b.iter_batched(
            || Trainer::new(model.clone(), config.train_config(), &views).expect("trainer"),
            |mut trainer| trainer.step().expect("step"),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, tensor_eval, ray_trace, train_step);
criterion_main!(benches);
