//! Tabular Q-learning over the two-action "run next learner / stop" choice.

mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::energy::PowerThresholds;
use crate::error::{Error, Result};
use crate::store;

pub use train::{
    train_offline, EnergyHistory, EpisodeStats, SchedulerEnv, CLIP_SECONDS, HISTORY_LEN,
};

pub const QTABLE_VERSION: u32 = 1;
pub const ACTIONS: usize = 2;

const E_LEVELS: usize = 4;
const P_LEVELS: usize = 3;
const R_LEVELS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct State {
    pub e_now: u8,
    pub e_last: u8,
    pub p_harv: u8,
    /// Learners already executed for the current request.
    pub l: u8,
    /// 1 while a request is active.
    pub r: u8,
}

/// `4 * 4 * 3 * (N + 1) * 2`.
pub fn state_count(n: usize) -> usize {
    E_LEVELS * E_LEVELS * P_LEVELS * (n + 1) * R_LEVELS
}

impl State {
    pub fn validate(&self, n: usize) -> Result<()> {
        let checks = [
            ("e_now", self.e_now as usize, E_LEVELS),
            ("e_last", self.e_last as usize, E_LEVELS),
            ("p_harv", self.p_harv as usize, P_LEVELS),
            ("l", self.l as usize, n + 1),
            ("r", self.r as usize, R_LEVELS),
        ];
        for (name, v, radix) in checks {
            if v >= radix {
                return Err(Error::StateOutOfRange(format!(
                    "{name} = {v}, must be < {radix}"
                )));
            }
        }
        Ok(())
    }

    /// Mixed-radix index, `e_now` most significant.
    pub fn encode(&self, n: usize) -> Result<usize> {
        self.validate(n)?;
        let mut idx = self.e_now as usize;
        idx = idx * E_LEVELS + self.e_last as usize;
        idx = idx * P_LEVELS + self.p_harv as usize;
        idx = idx * (n + 1) + self.l as usize;
        idx = idx * R_LEVELS + self.r as usize;
        Ok(idx)
    }

    pub fn decode(index: usize, n: usize) -> Result<Self> {
        if index >= state_count(n) {
            return Err(Error::StateOutOfRange(format!(
                "index {index} >= {}",
                state_count(n)
            )));
        }
        let mut rest = index;
        let mut take = |radix: usize| {
            let v = rest % radix;
            rest /= radix;
            v as u8
        };
        let r = take(R_LEVELS);
        let l = take(n + 1);
        let p_harv = take(P_LEVELS);
        let e_last = take(E_LEVELS);
        let e_now = take(E_LEVELS);
        Ok(Self {
            e_now,
            e_last,
            p_harv,
            l,
            r,
        })
    }
}

/// Reward shaping terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    pub beta: f64,
    pub p_miss: f64,
    /// `delta_acc[k]`: gain from running the k-th learner (`k = 1..=N`; index 0 unused).
    pub delta_acc: Vec<f64>,
}

impl RewardParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.p_miss >= 0.0) {
            return Err(Error::InvalidConfig(
                "beta and p_miss must be non-negative".into(),
            ));
        }
        if self.delta_acc.len() < 2 {
            return Err(Error::InvalidConfig(
                "delta_acc needs an entry per learner".into(),
            ));
        }
        Ok(())
    }

    pub fn ensemble_size(&self) -> usize {
        self.delta_acc.len() - 1
    }
}

/// Running the next learner earns its accuracy gain minus an energy penalty
/// on the missing usable-energy fraction; stopping with nothing executed
/// for an active request costs `p_miss`.
pub fn reward(s: &State, action: u8, params: &RewardParams, usable_fraction: f64) -> Result<f64> {
    let n = params.ensemble_size();
    match action {
        1 => {
            if s.l as usize >= n {
                return Err(Error::MaskedAction(n));
            }
            let deficit = 1.0 - usable_fraction.clamp(0.0, 1.0);
            Ok(params.delta_acc[s.l as usize + 1] - params.beta * deficit)
        }
        0 if s.r == 1 && s.l == 0 => Ok(-params.p_miss),
        0 => Ok(0.0),
        a => Err(Error::InvalidInput(format!("unknown action {a}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QHyperparams {
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_gamma")]
    pub discount: f64,
    #[serde(default = "d_eps0")]
    pub epsilon_start: f64,
    #[serde(default = "d_eps1")]
    pub epsilon_end: f64,
    /// Share of episodes over which epsilon decays linearly.
    #[serde(default = "d_anneal")]
    pub anneal_fraction: f64,
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_miss")]
    pub p_miss: f64,
}

fn d_lr() -> f64 {
    0.1
}
fn d_gamma() -> f64 {
    0.9
}
fn d_eps0() -> f64 {
    0.3
}
fn d_eps1() -> f64 {
    0.01
}
fn d_anneal() -> f64 {
    0.8
}
fn d_beta() -> f64 {
    0.05
}
fn d_miss() -> f64 {
    0.5
}

impl Default for QHyperparams {
    fn default() -> Self {
        Self {
            learning_rate: d_lr(),
            discount: d_gamma(),
            epsilon_start: d_eps0(),
            epsilon_end: d_eps1(),
            anneal_fraction: d_anneal(),
            beta: d_beta(),
            p_miss: d_miss(),
        }
    }
}

impl QHyperparams {
    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("learning_rate", self.learning_rate),
            ("discount", self.discount),
            ("epsilon_start", self.epsilon_start),
            ("epsilon_end", self.epsilon_end),
            ("anneal_fraction", self.anneal_fraction),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        if !(self.beta >= 0.0 && self.p_miss >= 0.0) {
            return Err(Error::InvalidConfig(
                "beta and p_miss must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Linear decay from start to end over the first `anneal_fraction` of episodes.
    pub fn epsilon(&self, episode: usize, episodes: usize) -> f64 {
        let span = self.anneal_fraction * episodes as f64;
        if span <= 0.0 {
            return self.epsilon_end;
        }
        let t = (episode as f64 / span).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QTable {
    pub version: u32,
    pub ensemble_size: usize,
    pub hyperparameters: QHyperparams,
    /// Power bins the table was trained with.
    pub power_thresholds: PowerThresholds,
    /// `values[state * 2 + action]`.
    pub values: Vec<f64>,
}

impl QTable {
    pub fn zeros(
        n: usize,
        hyperparameters: QHyperparams,
        power_thresholds: PowerThresholds,
    ) -> Self {
        Self {
            version: QTABLE_VERSION,
            ensemble_size: n,
            hyperparameters,
            power_thresholds,
            values: vec![0.0; state_count(n) * ACTIONS],
        }
    }

    pub fn q(&self, state_index: usize, action: u8) -> f64 {
        self.values[state_index * ACTIONS + action as usize]
    }

    /// Best value over allowed actions; action 1 excluded when masked.
    pub fn max_value(&self, state_index: usize, one_masked: bool) -> f64 {
        if one_masked {
            self.q(state_index, 0)
        } else {
            self.q(state_index, 0).max(self.q(state_index, 1))
        }
    }

    /// Greedy choice; ties go to 0.
    pub fn greedy(&self, state_index: usize, one_masked: bool) -> u8 {
        u8::from(!one_masked && self.q(state_index, 1) > self.q(state_index, 0))
    }

    /// One-step Q-learning on raw indices. `next` is `None` for terminal
    /// transitions, else the next state's index and whether action 1 is masked there.
    pub fn update_index(
        &mut self,
        state_index: usize,
        action: u8,
        r: f64,
        next: Option<(usize, bool)>,
    ) {
        self.update_index_discounted(state_index, action, r, next, self.hyperparameters.discount);
    }

    /// As [`update_index`](Self::update_index) with an explicit discount on the bootstrap.
    pub fn update_index_discounted(
        &mut self,
        state_index: usize,
        action: u8,
        r: f64,
        next: Option<(usize, bool)>,
        discount: f64,
    ) {
        let bootstrap = next.map_or(0.0, |(s, masked)| self.max_value(s, masked));
        let target = r + discount * bootstrap;
        let i = state_index * ACTIONS + action as usize;
        self.values[i] += self.hyperparameters.learning_rate * (target - self.values[i]);
    }

    pub fn act(&self, s: &State) -> Result<u8> {
        let idx = s.encode(self.ensemble_size)?;
        Ok(self.greedy(idx, s.l as usize >= self.ensemble_size))
    }

    pub fn update(&mut self, s: &State, action: u8, r: f64, next: Option<&State>) -> Result<()> {
        self.update_discounted(s, action, r, next, self.hyperparameters.discount)
    }

    pub fn update_discounted(
        &mut self,
        s: &State,
        action: u8,
        r: f64,
        next: Option<&State>,
        discount: f64,
    ) -> Result<()> {
        let n = self.ensemble_size;
        if action == 1 && s.l as usize >= n {
            return Err(Error::MaskedAction(n));
        }
        let si = s.encode(n)?;
        let next = match next {
            Some(ns) => Some((ns.encode(n)?, ns.l as usize >= n)),
            None => None,
        };
        self.update_index_discounted(si, action, r, next, discount);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        store::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t: QTable = store::read_json(path)?;
        let fail = |message: String| Error::Load {
            path: path.to_path_buf(),
            message,
        };
        if t.version != QTABLE_VERSION {
            return Err(fail(format!("unsupported Q-table version {}", t.version)));
        }
        if t.values.len() != state_count(t.ensemble_size) * ACTIONS {
            return Err(fail(format!(
                "{} values for ensemble size {}",
                t.values.len(),
                t.ensemble_size
            )));
        }
        Ok(t)
    }

    /// Loads and checks the table matches an ensemble of `n` learners.
    pub fn load_for(path: &Path, n: usize) -> Result<Self> {
        let t = Self::load(path)?;
        if t.ensemble_size != n {
            return Err(Error::Load {
                path: path.to_path_buf(),
                message: format!(
                    "table trained for N = {}, ensemble has N = {n}",
                    t.ensemble_size
                ),
            });
        }
        Ok(t)
    }
}
