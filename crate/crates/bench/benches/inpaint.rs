use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use deformsplat::inpaint::{inpaint_clip, temporal_attention, DiffusionSchedule, LatentClip, TinyConfig, TinyPredictor};
use ndarray::{Array2, Array4};

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("temporal_attention");
    for f in [8usize, 32, 128] {
        let m = Array2::from_shape_fn((f, 16), |(i, j)| ((i * 31 + j * 7) % 13) as f64 / 13.0 - 0.5);
        group.bench_with_input(BenchmarkId::from_parameter(f), &m, |b, m| {
            b.iter(|| temporal_attention(m.view(), m.view(), black_box(m.view())).unwrap())
        });
    }
    group.finish();
}

fn sampling(c: &mut Criterion) {
    let latents = Array4::from_shape_fn((8, 3, 32, 32), |(f, ch, y, x)| ((f + ch * 3 + y * 5 + x * 7) % 11) as f64 / 11.0);
    let mask = Array4::from_shape_fn((8, 1, 32, 32), |(_, _, y, x)| if (8..20).contains(&y) && (4..16).contains(&x) { 1.0 } else { 0.0 });
    let clip = LatentClip::new(latents, mask).unwrap();
    let schedule = DiffusionSchedule::default();
    let predictor = TinyPredictor::new(TinyConfig::default());
    let mut group = c.benchmark_group("inpaint_clip_8x32x32");
    group.sample_size(20);
    for steps in [2usize, 10] {
        group.bench_with_input(BenchmarkId::from_parameter(steps), &steps, |b, &s| {
            b.iter(|| inpaint_clip(black_box(&clip), &predictor, &schedule, s, 0).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, attention, sampling);
criterion_main!(benches);
