use std::path::Path;

use criterion::{criterion_group, criterion_main, Criterion};
use harvest_core::config::LoadedConfig;
use harvest_core::pipeline;
use harvest_core::sim::Policy;
use harvest_core::{TrainConfig, WeakLearner};

fn bundled() -> LoadedConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/bundled.json");
    LoadedConfig::from_file(&path).expect("bundled config")
}

fn engine(c: &mut Criterion) {
    let cfg = bundled();
    let ds = cfg.dataset().unwrap();
    let learner = WeakLearner::init("bench", cfg.network().unwrap(), 1).unwrap();
    let x = &ds.test[0].input;
    c.bench_function("forward/baseline", |b| {
        b.iter(|| learner.forward(x).unwrap())
    });

    let small = harvest_core::Dataset::new(
        ds.shape,
        ds.class_count,
        ds.train[..64].to_vec(),
        ds.eval.clone(),
        ds.test.clone(),
    )
    .unwrap();
    let tc = TrainConfig {
        epochs: 1,
        learning_rate: 0.05,
        batch_size: 16,
    };
    let w = vec![1.0; small.train.len()];
    c.bench_function("train_epoch/64_samples", |b| {
        b.iter(|| learner.train(&small, &w, &tc, 1).unwrap())
    });
}

fn runtime(c: &mut Criterion) {
    let mut cfg = bundled();
    // a short pool so setup stays quick
    cfg.config.pool.training.epochs = 1;
    cfg.config.scheduler.episodes = 50;
    let built = pipeline::build_ensemble(&cfg).unwrap();
    let samples = pipeline::request_samples(&cfg, &built.dataset);

    let mut g = c.benchmark_group("runtime");
    g.sample_size(10);
    g.bench_function("train_scheduler/50_episodes", |b| {
        b.iter(|| pipeline::train_scheduler(&cfg, &built.ensemble).unwrap())
    });
    g.bench_function("simulate/all", |b| {
        b.iter(|| pipeline::simulate(&cfg, &built.ensemble, &samples, &Policy::All).unwrap())
    });
    g.finish();
}

criterion_group!(benches, engine, runtime);
criterion_main!(benches);
