use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use deformsplat::metrics::ssim;
use deformsplat::pipeline::{scene_backward, scene_forward};
use deformsplat::raster::Rasterizer;
use deformsplat::sceneio::{synth_generate, SyntheticSceneSpec};
use deformsplat::train::{TrainConfig, Trainer};
use deformsplat_bench::{camera, random_scene};
use ndarray::{Array2, Array3};

fn deform(c: &mut Criterion) {
    let scene = random_scene(4000, 16, 3);
    c.bench_function("deform_forward/4000x16", |b| b.iter(|| scene_forward(black_box(&scene), 0.37).unwrap()));
    let cam = camera(128);
    let fwd = scene_forward(&scene, 0.37).unwrap();
    let mut r = Rasterizer::default();
    r.forward(&fwd.deformed, &cam);
    let grads = r
        .backward(&Array3::from_elem((128, 128, 3), 1e-4), &Array2::from_elem((128, 128), 1e-5))
        .unwrap();
    c.bench_function("deform_backward/4000x16", |b| b.iter(|| scene_backward(black_box(&scene), &fwd, &grads)));
}

fn train_step(c: &mut Criterion) {
    let spec = SyntheticSceneSpec {
        frames: 4,
        ..SyntheticSceneSpec::reconstruction_benchmark()
    };
    let data = synth_generate(&spec).unwrap();
    let config = TrainConfig {
        iterations: 1_000_000,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::from_frames(&data.frames, &data.cameras, config).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(20);
    group.bench_function("step_128/4000", |b| b.iter(|| trainer.step(&data.frames[1], &data.cameras[1], 1).unwrap()));
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let a = Array3::from_shape_fn((128, 128, 3), |(y, x, k)| ((x * 7 + y * 3 + k) % 17) as f64 / 17.0);
    let b = a.mapv(|v| (v * 0.9 + 0.05).min(1.0));
    c.bench_function("ssim_128", |bench| bench.iter(|| ssim(black_box(&a), black_box(&b)).unwrap()));
}

criterion_group!(benches, deform, train_step, metrics);
criterion_main!(benches);
