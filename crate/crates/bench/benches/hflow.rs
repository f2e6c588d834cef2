use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hflow_bench::{scene, style};
use hflow_core::flow::{model_forward, model_reverse};
use hflow_core::metrics::{checkerboard_energy, ssim};
use hflow_core::perceptual::{extract_features, LossTargets};
use hflow_core::training::{train_step, Adam};
use hflow_core::{init_params, translate, Fusion, LossConfig, ModelConfig, Styling, TranslateOptions, Variant, Vgg19};

fn coupling(c: &mut Criterion) {
    let mut group = c.benchmark_group("coupling");
    group.sample_size(20);
    for variant in [Variant::Hf, Variant::HfPlus] {
        let config = ModelConfig::preset(variant);
        let params = init_params(&config, 0);
        let x = scene(64, 0);
        group.bench_with_input(BenchmarkId::new("forward", variant.name()), &x, |b, x| {
            b.iter(|| model_forward(black_box(x), &config, &params).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("round_trip", variant.name()), &x, |b, x| {
            b.iter(|| {
                let (y, cache) = model_forward(black_box(x), &config, &params).unwrap();
                model_reverse(&y, cache, Styling::Bypass, &config, &params, Fusion::ForceOne).unwrap()
            })
        });
    }
    group.finish();
}

fn translation(c: &mut Criterion) {
    let config = ModelConfig::preset(Variant::Hf);
    let params = init_params(&config, 0);
    let (x, t) = (scene(64, 1), style(64, 2));
    c.bench_function("translate/HF/64", |b| {
        b.iter(|| translate(black_box(&x), Some(&t), &config, &params, TranslateOptions::default()).unwrap())
    });
}

fn features(c: &mut Criterion) {
    let vgg = Vgg19::standin(0);
    let mut group = c.benchmark_group("vgg_taps");
    group.sample_size(20);
    for size in [32, 64] {
        let x = scene(size, 3);
        group.bench_with_input(BenchmarkId::from_parameter(size), &x, |b, x| {
            b.iter(|| extract_features(black_box(x), &vgg).unwrap())
        });
    }
    group.finish();
}

fn training(c: &mut Criterion) {
    let config = ModelConfig::preset(Variant::Hf);
    let vgg = Vgg19::standin(0);
    let (x, t) = (scene(64, 4), style(64, 5));
    let targets = LossTargets::new(&x, &t, &vgg).unwrap();
    let loss = LossConfig::default();
    let mut params = init_params(&config, 0);
    let mut adam = Adam::new(&params);
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    group.bench_function("HF/64", |b| {
        b.iter(|| train_step(&config, &mut params, &mut adam, &x, &t, &targets, &loss, &vgg, 1e-5, 1).unwrap())
    });
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let (a, b) = (scene(256, 6), style(256, 7));
    c.bench_function("ssim/256", |bench| bench.iter(|| ssim(black_box(&a), &b).unwrap()));
    c.bench_function("checkerboard/256", |bench| bench.iter(|| checkerboard_energy(black_box(&a)).unwrap()));
}

criterion_group!(benches, coupling, translation, features, training, metrics);
criterion_main!(benches);
