use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{reward, QHyperparams, QTable, RewardParams, State};
use crate::energy::{
    discretize_energy, Capacitor, CapacitorConfig, CostModel, Device, PowerThresholds, PowerTrace,
    RequestPattern,
};
use crate::error::{Error, Result};

/// Length of one training episode: a 40-minute slice of the trace.
pub const CLIP_SECONDS: f64 = 2400.0;

/// Requests remembered for the `e_last` feature.
pub const HISTORY_LEN: usize = 10;

/// Mean post-inference usable fraction over the last few served requests.
#[derive(Debug, Clone, Default)]
pub struct EnergyHistory {
    window: VecDeque<f64>,
}

impl EnergyHistory {
    pub fn push(&mut self, fraction: f64) {
        if self.window.len() == HISTORY_LEN {
            self.window.pop_front();
        }
        self.window.push_back(fraction);
    }

    /// Falls back to `current` before any request has been served.
    pub fn mean_or(&self, current: f64) -> f64 {
        if self.window.is_empty() {
            current
        } else {
            self.window.iter().sum::<f64>() / self.window.len() as f64
        }
    }
}

/// Everything the scheduler perceives about the device.
#[derive(Debug, Clone)]
pub struct SchedulerEnv {
    pub capacitor: CapacitorConfig,
    pub cost: CostModel,
    pub trace: PowerTrace,
    pub thresholds: PowerThresholds,
    /// MACs of each ensemble member, in execution order.
    pub member_macs: Vec<u64>,
    pub request_period_s: f64,
    pub clip_s: f64,
}

impl SchedulerEnv {
    pub fn ensemble_size(&self) -> usize {
        self.member_macs.len()
    }

    /// Cost of the most expensive member: below this the battery is "depleted".
    pub fn one_learner_cost(&self) -> f64 {
        self.member_macs
            .iter()
            .map(|&m| self.cost.inference_cost(m))
            .fold(0.0, f64::max)
    }

    /// Reads the state right now; energy is re-read at every decision.
    pub fn observe(
        &self,
        device: &Device,
        history: &EnergyHistory,
        l: usize,
        request_active: bool,
    ) -> State {
        let usable_max = self.capacitor.usable_max();
        let cost = self.one_learner_cost();
        let frac = device.cap.usable_fraction();
        State {
            e_now: discretize_energy(device.cap.usable(), usable_max, cost),
            e_last: discretize_energy(history.mean_or(frac) * usable_max, usable_max, cost),
            p_harv: self.thresholds.level(device.harvest_power()),
            l: l as u8,
            r: u8::from(request_active),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.capacitor.validate()?;
        self.cost.validate()?;
        self.trace.validate()?;
        RequestPattern {
            period_s: self.request_period_s,
            horizon_s: self.clip_s,
        }
        .validate()?;
        if self.member_macs.is_empty() {
            return Err(Error::InvalidConfig(
                "scheduler needs at least one learner".into(),
            ));
        }
        if !(self.clip_s > 0.0) {
            return Err(Error::InvalidConfig(
                "episode clip length must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episode: usize,
    pub total_reward: f64,
    pub requests: usize,
    pub failures: usize,
    pub epsilon: f64,
}

/// Transition awaiting its successor state: `(state, action, reward, request index)`.
type Pending = (State, u8, f64, usize);

/// Offline epsilon-greedy Q-learning on random clips of the training trace.
///
/// Discounting is per request period, not per decision: steps inside one
/// request are undiscounted, so running another learner does not postpone
/// (and thereby shrink) the value of later requests.
pub fn train_offline(
    env: &SchedulerEnv,
    rewards: &RewardParams,
    hyper: &QHyperparams,
    episodes: usize,
    seed: u64,
) -> Result<(QTable, Vec<EpisodeStats>)> {
    env.validate()?;
    hyper.validate()?;
    rewards.validate()?;
    let n = env.ensemble_size();
    if rewards.ensemble_size() != n {
        return Err(Error::InvalidConfig(format!(
            "reward profile covers {} learners, ensemble has {n}",
            rewards.ensemble_size()
        )));
    }
    let mut table = QTable::zeros(n, hyper.clone(), env.thresholds);
    if episodes == 0 {
        log::warn!("zero training episodes: the Q-table stays all zero");
        return Ok((table, Vec::new()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clip = env
        .clip_s
        .min(env.trace.duration())
        .max(env.request_period_s);
    let latest_start = (env.trace.end_s - clip).max(env.trace.start_s());
    let arrivals = RequestPattern {
        period_s: env.request_period_s,
        horizon_s: clip,
    }
    .arrivals();
    let mut curve = Vec::with_capacity(episodes);

    for episode in 0..episodes {
        let epsilon = hyper.epsilon(episode, episodes);
        let offset = if latest_start > env.trace.start_s() {
            rng.random_range(env.trace.start_s()..latest_start)
        } else {
            env.trace.start_s()
        };
        let v0 = rng.random_range(env.capacitor.v_cutoff..=env.capacitor.v_max);
        let cap = Capacitor::new(env.capacitor.clone(), v0)?;
        let mut device = Device::new(cap, env.cost.clone(), &env.trace, offset);
        let mut history = EnergyHistory::default();
        let mut pending: Option<Pending> = None;
        let mut stats = EpisodeStats {
            episode,
            total_reward: 0.0,
            requests: 0,
            failures: 0,
            epsilon,
        };

        for (req, &t) in arrivals.iter().enumerate() {
            stats.requests += 1;
            // still busy with the previous request, or browned out
            if device.now() > t || {
                device.advance_to(t);
                !device.cap.is_on()
            } {
                stats.failures += 1;
                stats.total_reward -= rewards.p_miss;
                if let Some(p) = pending.as_mut() {
                    p.2 -= rewards.p_miss;
                }
                continue;
            }
            let mut l = 0usize;
            loop {
                let s = env.observe(&device, &history, l, true);
                if let Some((ps, pa, pr, preq)) = pending.take() {
                    let discount = hyper.discount.powi((req - preq) as i32);
                    table.update_discounted(&ps, pa, pr, Some(&s), discount)?;
                }
                let a = if l >= n {
                    0
                } else if rng.random::<f64>() < epsilon {
                    rng.random_range(0..=1u8)
                } else {
                    table.act(&s)?
                };
                let mut r = reward(&s, a, rewards, device.cap.usable_fraction())?;
                if a == 1 {
                    let ok = device.execute(env.member_macs[l], 0.0);
                    if !ok {
                        r -= rewards.p_miss;
                        stats.failures += 1;
                        stats.total_reward += r;
                        pending = Some((s, a, r, req));
                        break;
                    }
                    l += 1;
                    stats.total_reward += r;
                    pending = Some((s, a, r, req));
                } else {
                    if l == 0 {
                        stats.failures += 1;
                    } else {
                        history.push(device.cap.usable_fraction());
                    }
                    stats.total_reward += r;
                    pending = Some((s, a, r, req));
                    break;
                }
            }
        }
        if let Some((ps, pa, pr, _)) = pending.take() {
            table.update(&ps, pa, pr, None)?;
        }
        curve.push(stats);
    }
    Ok((table, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{synth_trace, TraceProfile};

    fn env(power_w: f64) -> SchedulerEnv {
        let trace = synth_trace(0, &TraceProfile::Constant { power_w }, 4800.0, 1.0).unwrap();
        SchedulerEnv {
            capacitor: CapacitorConfig::default(),
            cost: CostModel {
                energy_per_mac_j: 1e-6,
                ..Default::default()
            },
            trace,
            thresholds: PowerThresholds::new(1e-4, 1e-2).unwrap(),
            member_macs: vec![20_000; 3],
            request_period_s: 10.0,
            clip_s: CLIP_SECONDS,
        }
    }

    #[test]
    fn abundant_power_runs_everything() {
        let e = env(1.0);
        let rewards = RewardParams {
            beta: 0.05,
            p_miss: 2.0,
            delta_acc: vec![0.0, 0.6, 0.05, 0.03],
        };
        let (t, _) = train_offline(&e, &rewards, &QHyperparams::default(), 200, 1).unwrap();
        // full at arrival, slightly below full after each learner
        for l in 0..3u8 {
            let s = State {
                e_now: if l == 0 { 3 } else { 2 },
                e_last: 2,
                p_harv: 2,
                l,
                r: 1,
            };
            assert_eq!(t.act(&s).unwrap(), 1, "l = {l}");
        }
    }

    #[test]
    fn darkness_and_cheap_misses_conserve_energy() {
        let e = env(0.0);
        let rewards = RewardParams {
            beta: 0.5,
            p_miss: 0.001,
            delta_acc: vec![0.0, 0.05, 0.02, 0.01],
        };
        let (t, _) = train_offline(&e, &rewards, &QHyperparams::default(), 300, 2).unwrap();
        for e_last in 0..4u8 {
            let s = State {
                e_now: 1,
                e_last,
                p_harv: 0,
                l: 0,
                r: 1,
            };
            if t.q(s.encode(3).unwrap(), 0) != 0.0 || t.q(s.encode(3).unwrap(), 1) != 0.0 {
                assert_eq!(t.act(&s).unwrap(), 0);
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let e = env(0.005);
        let rewards = RewardParams {
            beta: 0.05,
            p_miss: 0.5,
            delta_acc: vec![0.0, 0.5, 0.02, 0.01],
        };
        let a = train_offline(&e, &rewards, &QHyperparams::default(), 20, 7).unwrap();
        let b = train_offline(&e, &rewards, &QHyperparams::default(), 20, 7).unwrap();
        assert_eq!(a, b);
        let (zero, curve) = train_offline(&e, &rewards, &QHyperparams::default(), 0, 7).unwrap();
        assert!(curve.is_empty() && zero.values.iter().all(|v| *v == 0.0));
    }
}
