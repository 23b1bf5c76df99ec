//! Request-driven simulation of an ensemble on a harvesting device.

mod report;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::energy::{
    Capacitor, CapacitorConfig, CostModel, Device, EnergyLedger, PowerThresholds, PowerTrace,
    RequestPattern,
};
use crate::ensemble::{weighted_vote, Ensemble};
use crate::error::{Error, Result};
use crate::scheduler::{EnergyHistory, QTable, SchedulerEnv, CLIP_SECONDS};

pub use report::{render, render_comparison, write_events_csv, ComparisonRow, ReportFormat};

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    QTable(Box<QTable>),
    /// Run the first `min(k, N)` learners whenever energy allows.
    Fixed(usize),
    All,
}

impl Policy {
    pub fn label(&self) -> String {
        match self {
            Policy::QTable(_) => "qtable".into(),
            Policy::Fixed(k) => format!("fixed:{k}"),
            Policy::All => "all".into(),
        }
    }
}

/// Policy named on the command line, before any table is loaded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PolicySpec {
    QTable(std::path::PathBuf),
    Fixed(usize),
    All,
}

impl FromStr for PolicySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(PolicySpec::All);
        }
        if let Some(path) = s.strip_prefix("qtable:") {
            if path.is_empty() {
                return Err(Error::InvalidConfig("qtable policy needs a path".into()));
            }
            return Ok(PolicySpec::QTable(path.into()));
        }
        if let Some(k) = s.strip_prefix("fixed:") {
            let k: usize = k
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad learner count in policy {s:?}")))?;
            if k == 0 {
                return Err(Error::InvalidConfig("fixed:k needs k >= 1".into()));
            }
            return Ok(PolicySpec::Fixed(k));
        }
        Err(Error::InvalidConfig(format!(
            "unknown policy {s:?}; use qtable:PATH, fixed:k or all"
        )))
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::QTable(p) => write!(f, "qtable:{}", p.display()),
            PolicySpec::Fixed(k) => write!(f, "fixed:{k}"),
            PolicySpec::All => f.write_str("all"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainMode {
    #[default]
    Off,
    /// All N learners infer, one of them also retrains.
    High,
    /// N - 1 learners infer, one of them also retrains.
    Low,
    /// High at battery level 2-3, low at 1, nothing at 0.
    Auto,
}

impl FromStr for RetrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Self::Off),
            "high" => Ok(Self::High),
            "low" => Ok(Self::Low),
            "auto" => Ok(Self::Auto),
            _ => Err(Error::InvalidConfig(format!("unknown retrain mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub capacitor: CapacitorConfig,
    #[serde(default)]
    pub cost: CostModel,
    pub request_period_s: f64,
    /// Defaults to the whole trace.
    #[serde(default)]
    pub duration_s: Option<f64>,
    #[serde(default = "default_v0")]
    pub initial_voltage: f64,
    #[serde(default)]
    pub retrain: RetrainMode,
    #[serde(default = "default_retrain_lr")]
    pub retrain_learning_rate: f64,
    /// Power bins for non-Q policies' state logging; Q policies use their own.
    #[serde(default)]
    pub power_thresholds: Option<PowerThresholds>,
    #[serde(default)]
    pub seed: u64,
}

fn default_v0() -> f64 {
    3.0
}
fn default_retrain_lr() -> f64 {
    0.05
}

impl SimConfig {
    pub fn validate(&self, trace: &PowerTrace) -> Result<()> {
        self.capacitor.validate()?;
        self.cost.validate()?;
        let horizon = self.horizon(trace);
        RequestPattern {
            period_s: self.request_period_s,
            horizon_s: horizon,
        }
        .validate()?;
        if horizon > trace.duration() + 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "duration {horizon} s exceeds the trace ({} s)",
                trace.duration()
            )));
        }
        if !(0.0..=self.capacitor.v_max).contains(&self.initial_voltage) {
            return Err(Error::InvalidConfig(
                "initial_voltage outside [0, v_max]".into(),
            ));
        }
        if !(self.retrain_learning_rate >= 0.0 && self.retrain_learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(
                "retrain_learning_rate must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn horizon(&self, trace: &PowerTrace) -> f64 {
        self.duration_s.unwrap_or_else(|| trace.duration())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    Served,
    /// Device below cutoff at arrival.
    Off,
    /// Arrived while the previous request was still executing.
    Dropped,
    /// Fixed-count execution refused for lack of energy.
    Insufficient,
    /// Ran out of energy mid-request.
    Brownout,
    /// Scheduler chose to run nothing.
    Declined,
}

impl EventType {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventType::Served => "served",
            EventType::Off => "off",
            EventType::Dropped => "dropped",
            EventType::Insufficient => "insufficient",
            EventType::Brownout => "brownout",
            EventType::Declined => "declined",
        }
    }
}

/// One row of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub voltage: f64,
    pub p_harv: f64,
    /// Decisions taken, e.g. `"110"`: run, run, stop.
    pub action: String,
    pub learners_run: usize,
    pub correct: Option<bool>,
    pub event_type: EventType,
    pub predicted: Option<usize>,
    pub inference_energy_j: f64,
    pub retrain_energy_j: f64,
    /// Battery level at arrival.
    pub energy_level: u8,
    pub retrained: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FailureBreakdown {
    pub off: usize,
    pub dropped: usize,
    pub insufficient: usize,
    pub brownout: usize,
    pub declined: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergySummary {
    pub initial_j: f64,
    pub final_j: f64,
    #[serde(flatten)]
    pub ledger: EnergyLedger,
    /// `final - (initial + harvested - consumed)`.
    pub closure_error_j: f64,
    pub inference_j: f64,
    pub retrain_j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub policy: String,
    pub failure_rate: Option<f64>,
    pub mean_accuracy: Option<f64>,
    /// `(baseline - this) / baseline` failure rate.
    pub failure_rate_reduction: Option<f64>,
    pub accuracy_drop: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub policy: String,
    pub retrain: RetrainMode,
    pub ensemble_size: usize,
    pub requests: usize,
    pub successes: usize,
    pub failures: usize,
    pub correct: usize,
    pub mean_accuracy: Option<f64>,
    pub failure_rate: Option<f64>,
    pub failure_breakdown: FailureBreakdown,
    /// Requests by learners executed, index `0..=N`.
    pub learners_histogram: Vec<usize>,
    /// Requests by battery level at arrival, index `0..=3`.
    pub energy_histogram: [usize; 4],
    pub energy: EnergySummary,
    pub retrain_events: usize,
    /// Retrained requests whose reused forward pass disagreed with a fresh one.
    pub reuse_mismatches: usize,
    pub baseline: Option<Baseline>,
    #[serde(skip)]
    pub events: Vec<Event>,
}

impl SimReport {
    /// Fills in the comparison against another run of the same scenario.
    pub fn compare_with(&mut self, base: &SimReport) {
        let reduction = match (base.failure_rate, self.failure_rate) {
            (Some(b), Some(s)) if b > 0.0 => Some((b - s) / b),
            _ => None,
        };
        let drop = match (base.mean_accuracy, self.mean_accuracy) {
            (Some(b), Some(s)) => Some(b - s),
            _ => None,
        };
        self.baseline = Some(Baseline {
            policy: base.policy.clone(),
            failure_rate: base.failure_rate,
            mean_accuracy: base.mean_accuracy,
            failure_rate_reduction: reduction,
            accuracy_drop: drop,
        });
    }

    pub fn mean_learners_per_success(&self) -> Option<f64> {
        let served: usize = self.learners_histogram.iter().skip(1).sum();
        (served > 0).then(|| {
            self.learners_histogram
                .iter()
                .enumerate()
                .map(|(k, c)| k * c)
                .sum::<usize>() as f64
                / served as f64
        })
    }
}

pub struct SimOutcome {
    pub report: SimReport,
    /// Ensemble after any on-device retraining.
    pub ensemble: Ensemble,
}

/// Runs `policy` over the trace, serving requests drawn from `samples`.
pub fn run(
    cfg: &SimConfig,
    ensemble: &Ensemble,
    trace: &PowerTrace,
    samples: &[Sample],
    policy: &Policy,
) -> Result<SimOutcome> {
    cfg.validate(trace)?;
    let n = ensemble.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty ensemble".into()));
    }
    if samples.is_empty() {
        return Err(Error::InvalidInput("no samples to serve".into()));
    }
    if let Policy::QTable(t) = policy {
        if t.ensemble_size != n {
            return Err(Error::InvalidConfig(format!(
                "Q-table built for N = {}, ensemble has N = {n}",
                t.ensemble_size
            )));
        }
    }
    let thresholds = match (policy, cfg.power_thresholds) {
        (Policy::QTable(t), _) => t.power_thresholds,
        (_, Some(t)) => t,
        _ => PowerThresholds::terciles(&trace.power_w)?,
    };
    let env = SchedulerEnv {
        capacitor: cfg.capacitor.clone(),
        cost: cfg.cost.clone(),
        trace: trace.clone(),
        thresholds,
        member_macs: ensemble.learners.iter().map(|l| l.macs).collect(),
        request_period_s: cfg.request_period_s,
        clip_s: CLIP_SECONDS,
    };
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));

    let cap = Capacitor::new(cfg.capacitor.clone(), cfg.initial_voltage)?;
    let mut device = Device::new(cap, cfg.cost.clone(), trace, trace.start_s());
    let mut history = EnergyHistory::default();
    let mut ens = ensemble.clone();
    let mut report = SimReport {
        policy: policy.label(),
        retrain: cfg.retrain,
        ensemble_size: n,
        requests: 0,
        successes: 0,
        failures: 0,
        correct: 0,
        mean_accuracy: None,
        failure_rate: None,
        failure_breakdown: FailureBreakdown::default(),
        learners_histogram: vec![0; n + 1],
        energy_histogram: [0; 4],
        energy: EnergySummary {
            initial_j: device.cap.energy(),
            final_j: 0.0,
            ledger: EnergyLedger::default(),
            closure_error_j: 0.0,
            inference_j: 0.0,
            retrain_j: 0.0,
        },
        retrain_events: 0,
        reuse_mismatches: 0,
        baseline: None,
        events: Vec::new(),
    };
    let mut round_robin = 0usize;
    let arrivals = RequestPattern {
        period_s: cfg.request_period_s,
        horizon_s: cfg.horizon(trace),
    }
    .arrivals();

    for (i, &t) in arrivals.iter().enumerate() {
        let sample = &samples[order[i % order.len()]];
        let busy = device.now() > t;
        if !busy {
            device.advance_to(t);
        }
        let level = env.observe(&device, &history, 0, true).e_now;
        let mut ev = Event {
            time: t,
            voltage: device.cap.voltage(),
            p_harv: trace.power_at(trace.start_s() + t),
            action: String::new(),
            learners_run: 0,
            correct: None,
            event_type: EventType::Served,
            predicted: None,
            inference_energy_j: 0.0,
            retrain_energy_j: 0.0,
            energy_level: level,
            retrained: None,
        };
        let mut pending_update = None;
        report.requests += 1;
        report.energy_histogram[level as usize] += 1;

        if busy {
            ev.event_type = EventType::Dropped;
        } else if !device.cap.is_on() {
            ev.event_type = EventType::Off;
        } else {
            let plan = match cfg.retrain {
                RetrainMode::Off => None,
                RetrainMode::High => Some(n),
                RetrainMode::Low => Some(n.saturating_sub(1).max(1)),
                RetrainMode::Auto => match level {
                    2 | 3 => Some(n),
                    1 => Some(n.saturating_sub(1).max(1)),
                    _ => None,
                },
            };
            let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(n);
            match (plan, policy) {
                (Some(k), _) => {
                    let target = round_robin % k;
                    let retrain_j = cfg.cost.retrain_cost(ens.learners[target].macs);
                    let needed: f64 = ens.learners[..k]
                        .iter()
                        .map(|l| cfg.cost.inference_cost(l.macs))
                        .sum::<f64>()
                        + retrain_j;
                    if device.cap.usable() < needed {
                        ev.event_type = EventType::Insufficient;
                    } else {
                        round_robin += 1;
                        for j in 0..k {
                            let extra = if j == target { retrain_j } else { 0.0 };
                            device.execute(ens.learners[j].macs, extra);
                            ev.action.push('1');
                            ev.inference_energy_j += cfg.cost.inference_cost(ens.learners[j].macs);
                            if j == target {
                                let fresh = ens.learners[j].forward(&sample.input)?;
                                let (updated, reused) = ens.learners[j].train_fc_only(
                                    std::slice::from_ref(sample),
                                    &[1.0],
                                    cfg.retrain_learning_rate,
                                )?;
                                if reused[0] != fresh {
                                    report.reuse_mismatches += 1;
                                }
                                outputs.push(
                                    reused.into_iter().next().expect("one output per sample"),
                                );
                                // the update lands after this request's prediction
                                pending_update = Some((j, updated));
                                ev.retrain_energy_j = retrain_j;
                                ev.retrained = Some(j);
                            } else {
                                outputs.push(ens.learners[j].forward(&sample.input)?);
                            }
                        }
                        if k < n {
                            ev.action.push('0');
                        }
                    }
                }
                (None, Policy::Fixed(_) | Policy::All) => {
                    let k = match policy {
                        Policy::Fixed(k) => (*k).min(n),
                        _ => n,
                    };
                    let needed: f64 = ens.learners[..k]
                        .iter()
                        .map(|l| cfg.cost.inference_cost(l.macs))
                        .sum();
                    if device.cap.usable() < needed {
                        ev.event_type = EventType::Insufficient;
                    } else {
                        for l in &ens.learners[..k] {
                            device.execute(l.macs, 0.0);
                            ev.action.push('1');
                            ev.inference_energy_j += cfg.cost.inference_cost(l.macs);
                            outputs.push(l.forward(&sample.input)?);
                        }
                        if k < n {
                            ev.action.push('0');
                        }
                    }
                }
                (None, Policy::QTable(table)) => loop {
                    let l = outputs.len();
                    let s = env.observe(&device, &history, l, true);
                    let a = table.act(&s)?;
                    ev.action.push(char::from(b'0' + a));
                    if a == 0 {
                        if l == 0 {
                            ev.event_type = EventType::Declined;
                        }
                        break;
                    }
                    let learner = &ens.learners[l];
                    if !device.execute(learner.macs, 0.0) {
                        ev.event_type = EventType::Brownout;
                        outputs.clear();
                        break;
                    }
                    ev.inference_energy_j += cfg.cost.inference_cost(learner.macs);
                    outputs.push(learner.forward(&sample.input)?);
                },
            }
            if ev.event_type == EventType::Served {
                let (pred, _) = weighted_vote(&outputs, &ens.vote_weights[..outputs.len()])?;
                ev.learners_run = outputs.len();
                ev.predicted = Some(pred);
                ev.correct = Some(pred == sample.label);
                history.push(device.cap.usable_fraction());
            }
        }
        if let Some((j, updated)) = pending_update.take() {
            ens.learners[j] = updated;
            report.retrain_events += 1;
        }
        tally(&mut report, &ev);
        report.events.push(ev);
    }
    // drain the rest of the horizon so the ledger covers the whole run
    device.advance_to(cfg.horizon(trace).max(device.now()));
    finish(&mut report, &device.cap);
    Ok(SimOutcome {
        report,
        ensemble: ens,
    })
}

fn tally(report: &mut SimReport, ev: &Event) {
    report.energy.inference_j += ev.inference_energy_j;
    report.energy.retrain_j += ev.retrain_energy_j;
    match ev.event_type {
        EventType::Served => {
            report.successes += 1;
            report.learners_histogram[ev.learners_run] += 1;
            if ev.correct == Some(true) {
                report.correct += 1;
            }
        }
        other => {
            report.failures += 1;
            report.learners_histogram[0] += 1;
            let b = &mut report.failure_breakdown;
            match other {
                EventType::Off => b.off += 1,
                EventType::Dropped => b.dropped += 1,
                EventType::Insufficient => b.insufficient += 1,
                EventType::Brownout => b.brownout += 1,
                EventType::Declined => b.declined += 1,
                EventType::Served => unreachable!(),
            }
        }
    }
}

fn finish(report: &mut SimReport, cap: &Capacitor) {
    report.failure_rate =
        (report.requests > 0).then(|| report.failures as f64 / report.requests as f64);
    report.mean_accuracy =
        (report.successes > 0).then(|| report.correct as f64 / report.successes as f64);
    report.energy.final_j = cap.energy();
    report.energy.ledger = cap.ledger();
    report.energy.closure_error_j = -cap.closure_error();
}
