use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use vqc_bench::latent_and_codebook;
use vqc_core::data::generate_phantom;
use vqc_core::losses::{ssim, PerceptualExtractor};
use vqc_core::trainer::{train_step, TrainState};
use vqc_core::vqc::SequenceSet;
use vqc_core::{estimate_vqc, quantize, sample_vqc, ModelConfig, ScaleMode, TrainConfig, VqcModel};

fn bench_quantize(c: &mut Criterion) {
    let mut group = c.benchmark_group("quantize_8x8_d3");
    for k in [16, 64, 256] {
        let (z, cb) = latent_and_codebook(8, 8, 3, k, 1);
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, _| {
            b.iter(|| quantize(black_box(&z), black_box(&cb)).unwrap())
        });
    }
    group.finish();
}

fn bench_vqc(c: &mut Criterion) {
    let grids: Vec<_> = (0..4).map(|s| latent_and_codebook(8, 8, 3, 16, s).0).collect();
    let refs: Vec<_> = grids.iter().collect();
    c.bench_function("estimate_vqc_4x8x8x3", |b| b.iter(|| estimate_vqc(black_box(&refs)).unwrap()));
    let stats = estimate_vqc(&refs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    c.bench_function("sample_vqc_8x8x3", |b| {
        b.iter(|| sample_vqc(black_box(&stats), &mut rng, ScaleMode::Variance).unwrap())
    });
}

fn bench_model(c: &mut Criterion) {
    let (_, images) = generate_phantom(3, 32, 32, 4, 1.0).unwrap();
    let model = VqcModel::<f32>::new(ModelConfig::default()).unwrap();
    c.bench_function("ssim_32x32", |b| b.iter(|| ssim(black_box(&images[0]), black_box(&images[1])).unwrap()));
    c.bench_function("encode_32x32", |b| b.iter(|| model.encode(black_box(&images[0])).unwrap()));

    let cfg = TrainConfig::default();
    let set = SequenceSet::new(images.into_iter().map(Some).collect()).unwrap();
    let extractor = PerceptualExtractor::<f32>::fixed();
    let mut state = TrainState::<f32>::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("step_32x32", |b| {
        b.iter(|| train_step(&mut state, &[&set], &cfg, &extractor, &mut rng).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_quantize, bench_vqc, bench_model);
criterion_main!(benches);
