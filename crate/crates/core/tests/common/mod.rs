#![allow(dead_code)]

use harvest_core::boost::{build_pool, PoolConfig, PruneSettings};
use harvest_core::energy::{CapacitorConfig, CostModel, PowerTrace, TraceProfile, TraceSource};
use harvest_core::ensemble::Ensemble;
use harvest_core::sim::SimConfig;
use harvest_core::{BlobConfig, Dataset, NetworkSpec, TrainConfig};

pub fn tiny_spec() -> NetworkSpec {
    serde_json::from_str(
        r#"{
        "input_shape": { "channels": 2, "height": 6, "width": 6 },
        "layers": [
            { "kind": "conv", "kernel": 3, "filters": 8, "padding": 1 },
            { "kind": "avg_pool", "window": 2 },
            { "kind": "dense", "units": 3, "activation": "none" },
            { "kind": "softmax" }
        ],
        "class_count": 3
    }"#,
    )
    .unwrap()
}

pub fn tiny_dataset(seed: u64) -> Dataset {
    BlobConfig {
        classes: 3,
        channels: 2,
        height: 6,
        width: 6,
        train: 150,
        eval: 60,
        test: 60,
        blobs_per_class: 2,
        position_jitter: 1.0,
        pixel_noise: 0.8,
        seed,
    }
    .generate()
    .unwrap()
}

pub fn tiny_pool_config(m: usize, n: usize, seed: u64) -> PoolConfig {
    PoolConfig {
        pool_size: m,
        ensemble_size: n,
        boost_learning_rate: 0.5,
        prune: PruneSettings {
            target_mac_fraction: None,
            filters_removed_per_step: 2,
            retrain_epochs_per_step: 1,
        },
        training: TrainConfig {
            epochs: 3,
            learning_rate: 0.05,
            batch_size: 16,
        },
        seed,
    }
}

/// A small trained ensemble and the data it was built on.
pub fn tiny_ensemble(n: usize, seed: u64) -> (Dataset, Ensemble) {
    let ds = tiny_dataset(seed);
    let spec = tiny_spec();
    let pool = build_pool(&spec, &ds, &tiny_pool_config(n + 1, n, seed)).unwrap();
    let ens = Ensemble::select(&pool.learners, &ds.eval, n, pool.baseline_macs).unwrap();
    (ds, ens)
}

pub fn constant_trace(power_w: f64, duration_s: f64) -> PowerTrace {
    PowerTrace::new(
        vec![0.0],
        vec![power_w],
        duration_s,
        TraceSource::Synthetic {
            seed: 0,
            profile: TraceProfile::Constant { power_w },
        },
    )
    .unwrap()
}

pub fn sim_config(duration_s: f64, seed: u64) -> SimConfig {
    SimConfig {
        capacitor: CapacitorConfig::default(),
        cost: CostModel::default(),
        request_period_s: 10.0,
        duration_s: Some(duration_s),
        initial_voltage: 3.0,
        retrain: Default::default(),
        retrain_learning_rate: 0.05,
        power_thresholds: None,
        seed,
    }
}
