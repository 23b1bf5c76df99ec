//! Harvesting environment: supercapacitor bookkeeping, power traces, the
//! per-learner cost model and the scheduler's state discretizers.

mod device;
mod trace;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use device::{Device, MAX_STEP_S};
pub use trace::{synth_trace, PowerTrace, TraceProfile, TraceSource};

/// Tolerance for "the capacitor is full".
pub const FULL_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacitorConfig {
    #[serde(default = "default_capacitance")]
    pub capacitance_f: f64,
    #[serde(default = "default_v_max")]
    pub v_max: f64,
    #[serde(default = "default_v_cutoff")]
    pub v_cutoff: f64,
}

fn default_capacitance() -> f64 {
    0.47
}
fn default_v_max() -> f64 {
    4.2
}
fn default_v_cutoff() -> f64 {
    1.7
}

impl Default for CapacitorConfig {
    fn default() -> Self {
        Self {
            capacitance_f: default_capacitance(),
            v_max: default_v_max(),
            v_cutoff: default_v_cutoff(),
        }
    }
}

impl CapacitorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.capacitance_f > 0.0 && self.capacitance_f.is_finite()) {
            return Err(Error::InvalidConfig("capacitance must be positive".into()));
        }
        if !(self.v_cutoff >= 0.0 && self.v_cutoff < self.v_max && self.v_max.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= v_cutoff < v_max, got {} / {}",
                self.v_cutoff, self.v_max
            )));
        }
        Ok(())
    }

    pub fn energy_at(&self, volts: f64) -> f64 {
        0.5 * self.capacitance_f * volts * volts
    }

    pub fn max_energy(&self) -> f64 {
        self.energy_at(self.v_max)
    }

    pub fn cutoff_energy(&self) -> f64 {
        self.energy_at(self.v_cutoff)
    }

    /// Energy between cutoff and full charge.
    pub fn usable_max(&self) -> f64 {
        self.max_energy() - self.cutoff_energy()
    }
}

/// Running totals used to verify energy closure.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    /// Harvest that was actually stored (spill excluded).
    pub harvested: f64,
    /// Energy actually delivered to the load.
    pub consumed: f64,
    /// Harvest discarded because the capacitor was full.
    pub spilled: f64,
    /// Load demand that could not be met because the capacitor was empty.
    pub unserved: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Capacitor {
    pub config: CapacitorConfig,
    energy: f64,
    initial: f64,
    ledger: EnergyLedger,
}

impl Capacitor {
    pub fn new(config: CapacitorConfig, volts: f64) -> Result<Self> {
        config.validate()?;
        if !(0.0..=config.v_max).contains(&volts) {
            return Err(Error::InvalidConfig(format!(
                "initial voltage {volts} outside [0, {}]",
                config.v_max
            )));
        }
        let energy = config.energy_at(volts);
        Ok(Self {
            config,
            energy,
            initial: energy,
            ledger: EnergyLedger::default(),
        })
    }

    pub fn energy(&self) -> f64 {
        self.energy
    }

    pub fn initial_energy(&self) -> f64 {
        self.initial
    }

    pub fn ledger(&self) -> EnergyLedger {
        self.ledger
    }

    /// `initial + harvested - consumed - stored`; zero up to rounding.
    pub fn closure_error(&self) -> f64 {
        self.initial + self.ledger.harvested - self.ledger.consumed - self.energy
    }

    pub fn voltage(&self) -> f64 {
        (2.0 * self.energy / self.config.capacitance_f).sqrt()
    }

    pub fn is_on(&self) -> bool {
        self.energy >= self.config.cutoff_energy()
    }

    pub fn usable(&self) -> f64 {
        (self.energy - self.config.cutoff_energy()).max(0.0)
    }

    /// Usable energy over its maximum, in `[0, 1]`.
    pub fn usable_fraction(&self) -> f64 {
        (self.usable() / self.config.usable_max()).clamp(0.0, 1.0)
    }

    /// Advances by `dt` seconds with constant harvest and load power.
    /// Returns `true` when the load could not be fully served.
    pub fn step(&mut self, harvest_w: f64, load_w: f64, dt: f64) -> bool {
        debug_assert!(dt > 0.0 && harvest_w >= 0.0 && load_w >= 0.0);
        let gained = harvest_w * dt;
        let demanded = load_w * dt;
        let mut next = self.energy + gained - demanded;
        let mut delivered = demanded;
        let mut deficit = false;
        if next < 0.0 {
            self.ledger.unserved += -next;
            delivered += next;
            next = 0.0;
            deficit = true;
        }
        let max = self.config.max_energy();
        let mut spill = 0.0;
        if next > max {
            spill = next - max;
            next = max;
        }
        self.ledger.spilled += spill;
        self.ledger.harvested += gained - spill;
        self.ledger.consumed += delivered;
        self.energy = next;
        deficit
    }

    /// Draws `joules` from the usable reserve at once. If the reserve is too
    /// small the device browns out: the reserve is spent and `false` returned.
    pub fn draw(&mut self, joules: f64) -> bool {
        debug_assert!(joules >= 0.0);
        let usable = self.usable();
        if usable >= joules {
            self.energy -= joules;
            self.ledger.consumed += joules;
            true
        } else {
            self.energy -= usable;
            self.ledger.consumed += usable;
            self.ledger.unserved += joules - usable;
            false
        }
    }
}

/// Energy/time model of running learners on the device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    #[serde(default = "default_energy_per_mac")]
    pub energy_per_mac_j: f64,
    #[serde(default = "default_overhead")]
    pub inference_overhead_j: f64,
    #[serde(default = "default_sleep")]
    pub sleep_power_w: f64,
    #[serde(default = "default_active_idle")]
    pub active_idle_power_w: f64,
    /// FC-backward cost as a fraction of the learner's forward cost.
    #[serde(default = "default_retrain_fraction")]
    pub fc_retrain_energy_fraction: f64,
    /// Execution time per MAC; 0 makes inference instantaneous.
    #[serde(default)]
    pub seconds_per_mac: f64,
}

fn default_energy_per_mac() -> f64 {
    1e-9
}
fn default_overhead() -> f64 {
    1e-4
}
fn default_sleep() -> f64 {
    5e-6
}
fn default_active_idle() -> f64 {
    1e-3
}
fn default_retrain_fraction() -> f64 {
    0.3
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            energy_per_mac_j: default_energy_per_mac(),
            inference_overhead_j: default_overhead(),
            sleep_power_w: default_sleep(),
            active_idle_power_w: default_active_idle(),
            fc_retrain_energy_fraction: default_retrain_fraction(),
            seconds_per_mac: 0.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("energy_per_mac_j", self.energy_per_mac_j),
            ("inference_overhead_j", self.inference_overhead_j),
            ("sleep_power_w", self.sleep_power_w),
            ("active_idle_power_w", self.active_idle_power_w),
            (
                "fc_retrain_energy_fraction",
                self.fc_retrain_energy_fraction,
            ),
            ("seconds_per_mac", self.seconds_per_mac),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "cost model {name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn inference_cost(&self, macs: u64) -> f64 {
        macs as f64 * self.energy_per_mac_j + self.inference_overhead_j
    }

    /// Seconds one learner occupies the device.
    pub fn inference_time(&self, macs: u64) -> f64 {
        macs as f64 * self.seconds_per_mac
    }

    /// One FC-only update on one sample.
    pub fn retrain_cost(&self, macs: u64) -> f64 {
        self.fc_retrain_energy_fraction * self.inference_cost(macs)
    }
}

/// Periodic inference requests over a horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestPattern {
    pub period_s: f64,
    pub horizon_s: f64,
}

impl RequestPattern {
    pub fn validate(&self) -> Result<()> {
        if !(self.period_s > 0.0 && self.period_s.is_finite()) {
            return Err(Error::InvalidConfig(
                "request period must be positive".into(),
            ));
        }
        if !(self.horizon_s >= 0.0 && self.horizon_s.is_finite()) {
            return Err(Error::InvalidConfig(
                "request horizon must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Arrival times `0, period, 2*period, ... < horizon`.
    pub fn arrivals(&self) -> Vec<f64> {
        let count = (self.horizon_s / self.period_s).ceil() as usize;
        (0..count)
            .map(|i| i as f64 * self.period_s)
            .filter(|&t| t < self.horizon_s)
            .collect()
    }
}

/// Table-1 battery level: 0 depleted, 1 low, 2 high, 3 full.
pub fn discretize_energy(usable: f64, usable_max: f64, one_learner_cost: f64) -> u8 {
    if usable < one_learner_cost {
        0
    } else if usable >= usable_max - FULL_TOLERANCE {
        3
    } else if usable < 0.5 * usable_max {
        1
    } else {
        2
    }
}

/// Thresholds splitting harvested power into low / mid / high.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerThresholds {
    pub t1: f64,
    pub t2: f64,
}

impl PowerThresholds {
    pub fn new(t1: f64, t2: f64) -> Result<Self> {
        if !(t1 < t2 && t1.is_finite() && t2.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "power thresholds need t1 < t2, got {t1}, {t2}"
            )));
        }
        Ok(Self { t1, t2 })
    }

    /// Terciles of the sample powers. Zero power always lands in bin 0, so
    /// `t1` is nudged above 0 when a third or more of the samples are dark.
    pub fn terciles(powers: &[f64]) -> Result<Self> {
        if powers.is_empty() {
            return Err(Error::InvalidInput(
                "cannot take terciles of an empty trace".into(),
            ));
        }
        let mut sorted = powers.to_vec();
        sorted.sort_by(f64::total_cmp);
        let q = |f: f64| sorted[((sorted.len() as f64 * f).floor() as usize).min(sorted.len() - 1)];
        let t1 = q(1.0 / 3.0).max(f64::MIN_POSITIVE);
        let mut t2 = q(2.0 / 3.0);
        if t2 <= t1 {
            t2 = next_up(t1);
        }
        Self::new(t1, t2)
    }

    pub fn level(&self, power_w: f64) -> u8 {
        discretize_power(power_w, self)
    }
}

fn next_up(x: f64) -> f64 {
    let bumped = f64::from_bits(x.to_bits() + 1);
    if bumped > x {
        bumped
    } else {
        x + f64::MIN_POSITIVE
    }
}

/// 0 below `t1`, 1 in `[t1, t2)`, 2 from `t2` up.
pub fn discretize_power(power_w: f64, t: &PowerThresholds) -> u8 {
    if power_w < t.t1 {
        0
    } else if power_w < t.t2 {
        1
    } else {
        2
    }
}
