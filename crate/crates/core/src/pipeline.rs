//! End-to-end steps shared by the CLI, benches and tests.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boost::{build_pool, Pool};
use crate::config::{LoadedConfig, SampleSplit};
use crate::data::{Dataset, Sample, Split};
use crate::energy::{PowerThresholds, PowerTrace};
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::scheduler::{train_offline, EpisodeStats, QTable, RewardParams, SchedulerEnv};
use crate::sim::{self, Policy, SimOutcome};
use crate::store;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSummary {
    pub pool_index: usize,
    pub macs: u64,
    pub param_count: u64,
    pub eval_accuracy: f64,
    pub test_accuracy: f64,
    pub generation: u32,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildSummary {
    pub ensemble_size: usize,
    pub pool_size: usize,
    pub baseline_macs: u64,
    pub baseline_params: u64,
    pub learners: Vec<LearnerSummary>,
    /// Pool indices in execution order.
    pub selected: Vec<usize>,
    pub total_macs: u64,
    pub total_macs_ratio: f64,
    pub accuracy_profile: Vec<f64>,
    pub delta_accuracy: Vec<f64>,
    pub ensemble_test_accuracy: f64,
    pub best_individual_test_accuracy: f64,
}

pub struct BuildArtifacts {
    pub dataset: Dataset,
    pub pool: Pool,
    pub ensemble: Ensemble,
    pub summary: BuildSummary,
}

pub fn build_ensemble(cfg: &LoadedConfig) -> Result<BuildArtifacts> {
    let dataset = cfg.dataset()?;
    let spec = cfg.network()?;
    let pool_cfg = cfg.pool_config();
    let pool = build_pool(&spec, &dataset, &pool_cfg)?;
    let ensemble = Ensemble::select(
        &pool.learners,
        &dataset.eval,
        pool_cfg.ensemble_size,
        pool.baseline_macs,
    )?;
    let summary = summarize(&dataset, &pool, &ensemble)?;
    Ok(BuildArtifacts {
        dataset,
        pool,
        ensemble,
        summary,
    })
}

pub fn summarize(dataset: &Dataset, pool: &Pool, ensemble: &Ensemble) -> Result<BuildSummary> {
    let mut learners = Vec::with_capacity(pool.learners.len());
    for (m, l) in pool.learners.iter().enumerate() {
        learners.push(LearnerSummary {
            pool_index: m,
            macs: l.macs,
            param_count: l.param_count(),
            eval_accuracy: l.eval_accuracy,
            test_accuracy: l.accuracy(&dataset.test)?,
            generation: pool.generations[m],
            selected: ensemble.pool_indices.contains(&m),
        });
    }
    let best = learners.iter().map(|l| l.test_accuracy).fold(0.0, f64::max);
    Ok(BuildSummary {
        ensemble_size: ensemble.len(),
        pool_size: pool.learners.len(),
        baseline_macs: pool.baseline_macs,
        baseline_params: pool.baseline_params,
        learners,
        selected: ensemble.pool_indices.clone(),
        total_macs: ensemble.total_macs(),
        total_macs_ratio: ensemble.total_macs() as f64 / pool.baseline_macs as f64,
        accuracy_profile: ensemble.accuracy_profile.clone(),
        delta_accuracy: ensemble.delta_accuracy(),
        ensemble_test_accuracy: ensemble.accuracy(&dataset.test, ensemble.len())?,
        best_individual_test_accuracy: best,
    })
}

/// `<out>/pool/`, `<out>/ensemble/ensemble.json`, `<out>/summary.json`.
pub fn write_build(a: &BuildArtifacts, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    a.pool.save(&out.join("pool"))?;
    a.ensemble.save(&out.join("ensemble"))?;
    store::write_json(&out.join("summary.json"), &a.summary)
}

pub fn render_summary(s: &BuildSummary) -> String {
    let mut t = String::new();
    let _ = writeln!(
        t,
        "baseline: {} MACs, {} params",
        s.baseline_macs, s.baseline_params
    );
    let _ = writeln!(
        t,
        "{:>4} {:>8} {:>8} {:>8} {:>8}  sel",
        "idx", "macs", "params", "eval", "test"
    );
    for l in &s.learners {
        let _ = writeln!(
            t,
            "{:>4} {:>8} {:>8} {:>8.4} {:>8.4}  {}",
            l.pool_index,
            l.macs,
            l.param_count,
            l.eval_accuracy,
            l.test_accuracy,
            if l.selected { "*" } else { "" }
        );
    }
    let _ = writeln!(
        t,
        "ensemble of {}: {} MACs ({:.1}% of baseline), test accuracy {:.4} (best single {:.4})",
        s.ensemble_size,
        s.total_macs,
        100.0 * s.total_macs_ratio,
        s.ensemble_test_accuracy,
        s.best_individual_test_accuracy
    );
    let profile: Vec<String> = s
        .accuracy_profile
        .iter()
        .map(|a| format!("{a:.4}"))
        .collect();
    let _ = writeln!(t, "acc[k]: {}", profile.join(" "));
    t
}

pub fn reward_params(cfg: &LoadedConfig, ensemble: &Ensemble) -> RewardParams {
    let h = &cfg.config.scheduler.hyperparameters;
    RewardParams {
        beta: h.beta,
        p_miss: h.p_miss,
        delta_acc: ensemble.delta_accuracy(),
    }
}

/// Thresholds from the config, else terciles of the training trace.
pub fn power_thresholds(
    cfg: &LoadedConfig,
    training_trace: &PowerTrace,
) -> Result<PowerThresholds> {
    match cfg.config.energy.power_thresholds {
        Some(t) => Ok(t),
        None => PowerThresholds::terciles(&training_trace.power_w),
    }
}

pub fn scheduler_env(cfg: &LoadedConfig, ensemble: &Ensemble) -> Result<SchedulerEnv> {
    let trace = cfg.training_trace()?;
    let thresholds = power_thresholds(cfg, &trace)?;
    let c = &cfg.config;
    Ok(SchedulerEnv {
        capacitor: c.energy.capacitor.clone(),
        cost: c.energy.cost.clone(),
        trace,
        thresholds,
        member_macs: ensemble.learners.iter().map(|l| l.macs).collect(),
        request_period_s: c.energy.request_period_s,
        clip_s: c.scheduler.clip_s,
    })
}

pub fn train_scheduler(
    cfg: &LoadedConfig,
    ensemble: &Ensemble,
) -> Result<(QTable, Vec<EpisodeStats>)> {
    let env = scheduler_env(cfg, ensemble)?;
    let s = &cfg.config.scheduler;
    train_offline(
        &env,
        &reward_params(cfg, ensemble),
        &s.hyperparameters,
        s.episodes,
        s.seed,
    )
}

pub fn curve_csv(curve: &[EpisodeStats]) -> String {
    let mut s = String::from("episode,total_reward,requests,failures,epsilon\n");
    for e in curve {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            e.episode, e.total_reward, e.requests, e.failures, e.epsilon
        );
    }
    s
}

/// The request stream: the configured split, label-shifted if asked.
pub fn request_samples(cfg: &LoadedConfig, dataset: &Dataset) -> Vec<Sample> {
    let sim = &cfg.config.simulation;
    let split = match sim.samples {
        SampleSplit::Eval => Split::Eval,
        SampleSplit::Test => Split::Test,
    };
    if sim.label_shift == 0 {
        dataset.split(split).to_vec()
    } else {
        dataset.label_shifted(sim.label_shift).split(split).to_vec()
    }
}

pub fn simulate(
    cfg: &LoadedConfig,
    ensemble: &Ensemble,
    samples: &[Sample],
    policy: &Policy,
) -> Result<SimOutcome> {
    let trace = cfg.eval_trace()?;
    sim::run(&cfg.sim_config(), ensemble, &trace, samples, policy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_has_one_row_per_episode() {
        let curve = vec![
            EpisodeStats {
                episode: 0,
                total_reward: -1.5,
                requests: 10,
                failures: 2,
                epsilon: 0.3,
            },
            EpisodeStats {
                episode: 1,
                total_reward: 2.0,
                requests: 10,
                failures: 0,
                epsilon: 0.2,
            },
        ];
        let csv = curve_csv(&curve);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "episode,total_reward,requests,failures,epsilon");
        assert_eq!(lines[1], "0,-1.5,10,2,0.3");
        assert_eq!(lines.len(), 3);
    }
}
