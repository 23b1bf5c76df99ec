mod common;

use common::*;
use harvest_core::energy::{CapacitorConfig, CostModel};
use harvest_core::sim::{self, EventType, Policy, RetrainMode};

#[test]
fn unlimited_energy_serves_everything_at_full_accuracy() {
    let (ds, ens) = tiny_ensemble(3, 1);
    let n_req = ds.eval.len();
    let mut cfg = sim_config(10.0 * n_req as f64, 3);
    cfg.capacitor = CapacitorConfig {
        capacitance_f: 1e6,
        ..CapacitorConfig::default()
    };
    let trace = constant_trace(10.0, cfg.duration_s.unwrap());
    let r = sim::run(&cfg, &ens, &trace, &ds.eval, &Policy::All)
        .unwrap()
        .report;
    assert_eq!(r.requests, n_req);
    assert_eq!(r.failures, 0);
    let expect = ens.accuracy(&ds.eval, ens.len()).unwrap();
    assert_eq!(r.mean_accuracy.unwrap(), expect);
    assert_eq!(r.learners_histogram[ens.len()], n_req);
}

#[test]
fn darkness_eventually_fails_every_request() {
    let (ds, ens) = tiny_ensemble(2, 2);
    let mut cfg = sim_config(20_000.0, 1);
    cfg.cost.energy_per_mac_j = 1e-5;
    let trace = constant_trace(0.0, 20_000.0);
    let r = sim::run(&cfg, &ens, &trace, &ds.test, &Policy::All)
        .unwrap()
        .report;
    assert!(r.successes > 0, "starts charged");
    let tail = &r.events[r.events.len() - 100..];
    assert!(tail.iter().all(|e| e.event_type != EventType::Served));
    assert!(r.energy.closure_error_j.abs() < 1e-6);
}

#[test]
fn fewer_learners_never_fail_more() {
    let (ds, ens) = tiny_ensemble(4, 3);
    let mut cfg = sim_config(6000.0, 2);
    cfg.cost.energy_per_mac_j = 2e-5;
    let trace = synth(6000.0);
    let mut last = 0usize;
    for k in 1..=4 {
        let r = sim::run(&cfg, &ens, &trace, &ds.test, &Policy::Fixed(k))
            .unwrap()
            .report;
        assert!(r.energy.closure_error_j.abs() < 1e-6);
        assert!(
            r.failures >= last,
            "fixed:{k} failed {} < {last}",
            r.failures
        );
        last = r.failures;
    }
    let all = sim::run(&cfg, &ens, &trace, &ds.test, &Policy::All)
        .unwrap()
        .report;
    assert_eq!(all.failures, last);
}

#[test]
fn zero_rate_retraining_matches_plain_run() {
    let (ds, ens) = tiny_ensemble(3, 4);
    let mut cfg = sim_config(3000.0, 5);
    let trace = synth(3000.0);
    let plain = sim::run(&cfg, &ens, &trace, &ds.test, &Policy::All).unwrap();
    cfg.retrain = RetrainMode::High;
    cfg.retrain_learning_rate = 0.0;
    cfg.cost.fc_retrain_energy_fraction = 0.0;
    let re = sim::run(&cfg, &ens, &trace, &ds.test, &Policy::All).unwrap();
    assert!(re.report.retrain_events > 0);
    assert_eq!(re.report.reuse_mismatches, 0);
    let p: Vec<_> = plain.report.events.iter().map(|e| e.predicted).collect();
    let q: Vec<_> = re.report.events.iter().map(|e| e.predicted).collect();
    assert_eq!(p, q);
    assert_eq!(re.ensemble.learners, ens.learners);
}

#[test]
fn retraining_keeps_predictions_and_conv_weights() {
    let (ds, ens) = tiny_ensemble(3, 5);
    let shifted = ds.label_shifted(1);
    let mut cfg = sim_config(3000.0, 6);
    cfg.capacitor.capacitance_f = 1e4;
    let trace = constant_trace(1.0, 3000.0);
    let plain = sim::run(&cfg, &ens, &trace, &shifted.test, &Policy::All).unwrap();
    cfg.retrain = RetrainMode::High;
    let re = sim::run(&cfg, &ens, &trace, &shifted.test, &Policy::All).unwrap();
    assert!(re.report.retrain_events > 0);
    assert_eq!(re.report.reuse_mismatches, 0);
    // the first request's prediction is unaffected by any update
    assert_eq!(
        plain.report.events[0].predicted,
        re.report.events[0].predicted
    );
    for (a, b) in ens.learners.iter().zip(&re.ensemble.learners) {
        assert_eq!(a.params.frozen_checksum(), b.params.frozen_checksum());
    }
    let before = ens.accuracy(&shifted.eval, ens.len()).unwrap();
    let after = re.ensemble.accuracy(&shifted.eval, ens.len()).unwrap();
    assert!(after > before, "{after} <= {before}");
}

#[test]
fn low_mode_costs_three_quarters() {
    let cost = CostModel::default();
    let macs = 20_000u64;
    let all = 4.0 * cost.inference_cost(macs);
    let low = 3.0 * cost.inference_cost(macs);
    assert_eq!(low / all, 0.75);
}

#[test]
fn mismatched_qtable_is_rejected() {
    let (ds, ens) = tiny_ensemble(2, 6);
    let cfg = sim_config(100.0, 0);
    let trace = constant_trace(0.01, 100.0);
    let t = harvest_core::scheduler::QTable::zeros(
        3,
        Default::default(),
        harvest_core::energy::PowerThresholds::new(0.001, 0.002).unwrap(),
    );
    assert!(sim::run(&cfg, &ens, &trace, &ds.test, &Policy::QTable(Box::new(t))).is_err());
}

fn synth(duration: f64) -> harvest_core::energy::PowerTrace {
    harvest_core::energy::synth_trace(
        9,
        &harvest_core::energy::TraceProfile::DayNight {
            period_s: 1200.0,
            peak_w: 0.01,
        },
        duration,
        1.0,
    )
    .unwrap()
}
