use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use stegalift::sda::SdaPreset;
use stegalift::trainer::run_training;
use stegalift::{DetectorConfig, HiderConfig, Model, TrainConfig};
use stegalift_bench::{pairs, rng};

fn model() -> Model {
    Model::new(DetectorConfig::default(), &HiderConfig::default(), &mut rng(5)).unwrap()
}

fn scoring(c: &mut Criterion) {
    let m = model();
    let data = pairs(1, 32, 6);
    c.bench_function("score one 32x32 pair", |b| {
        b.iter(|| m.score_pair(black_box(&data.secrets[0]), &data.covers[0]).unwrap())
    });
}

fn one_epoch_per_stage(c: &mut Criterion) {
    let data = pairs(8, 32, 7);
    let cfg = TrainConfig {
        epochs: [1, 1, 1],
        alignment: SdaPreset::FaL2AaSda.config(),
        ..TrainConfig::default()
    };
    let mut g = c.benchmark_group("training");
    g.sample_size(10);
    g.bench_function("three stages, one batch of 8", |b| {
        b.iter(|| run_training(&cfg, black_box(&data), model()).unwrap())
    });
    g.finish();
}

criterion_group!(benches, scoring, one_epoch_per_stage);
criterion_main!(benches);
