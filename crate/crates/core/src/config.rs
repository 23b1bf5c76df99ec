//! The single JSON document driving every CLI command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boost::{PoolConfig, PruneSettings};
use crate::data::{BlobConfig, Dataset};
use crate::energy::{
    synth_trace, CapacitorConfig, CostModel, PowerThresholds, PowerTrace, TraceProfile,
};
use crate::error::{Error, Result};
use crate::nn::{NetworkSpec, TensorShape, TrainConfig};
use crate::scheduler::{QHyperparams, CLIP_SECONDS};
use crate::sim::{RetrainMode, SimConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSection {
    Generator(BlobConfig),
    Csv {
        shape: TensorShape,
        class_count: usize,
        train: PathBuf,
        eval: PathBuf,
        test: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSection {
    pub pool_size: usize,
    #[serde(default = "half")]
    pub boost_learning_rate: f64,
    #[serde(default)]
    pub prune: PruneSettings,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub seed: u64,
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TraceSection {
    Synthetic {
        profile: TraceProfile,
        duration_s: f64,
        #[serde(default = "one_second")]
        dt_s: f64,
        #[serde(default)]
        seed: u64,
    },
    File {
        path: PathBuf,
        #[serde(default = "unit_efficiency")]
        efficiency: f64,
    },
}

fn one_second() -> f64 {
    1.0
}
fn unit_efficiency() -> f64 {
    1.0
}

impl TraceSection {
    pub fn load(&self, base: &Path) -> Result<PowerTrace> {
        match self {
            TraceSection::Synthetic {
                profile,
                duration_s,
                dt_s,
                seed,
            } => synth_trace(*seed, profile, *duration_s, *dt_s),
            TraceSection::File { path, efficiency } => {
                PowerTrace::from_csv(resolve(base, path), *efficiency)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergySection {
    #[serde(default)]
    pub capacitor: CapacitorConfig,
    #[serde(default)]
    pub cost: CostModel,
    /// Trace the simulation runs on.
    pub trace: TraceSection,
    #[serde(default)]
    pub power_thresholds: Option<PowerThresholds>,
    pub request_period_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerSection {
    #[serde(default)]
    pub hyperparameters: QHyperparams,
    pub episodes: usize,
    /// Trace the agent trains on; defaults to the energy trace.
    #[serde(default)]
    pub trace: Option<TraceSection>,
    #[serde(default = "clip")]
    pub clip_s: f64,
    #[serde(default)]
    pub seed: u64,
}

fn clip() -> f64 {
    CLIP_SECONDS
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSplit {
    Eval,
    #[default]
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(default)]
    pub duration_s: Option<f64>,
    #[serde(default = "v0")]
    pub initial_voltage: f64,
    #[serde(default)]
    pub retrain: RetrainMode,
    #[serde(default = "retrain_lr")]
    pub retrain_learning_rate: f64,
    /// Split the request stream draws from.
    #[serde(default)]
    pub samples: SampleSplit,
    /// Serve the label-shifted variant of the data (drift).
    #[serde(default)]
    pub label_shift: usize,
    #[serde(default)]
    pub seed: u64,
}

fn v0() -> f64 {
    3.0
}
fn retrain_lr() -> f64 {
    0.05
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            duration_s: None,
            initial_voltage: v0(),
            retrain: RetrainMode::Off,
            retrain_learning_rate: retrain_lr(),
            samples: SampleSplit::Test,
            label_shift: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    pub dataset: DatasetSection,
    /// Baseline network spec, relative to the config file.
    pub network: PathBuf,
    pub pool: PoolSection,
    pub ensemble: EnsembleSection,
    pub energy: EnergySection,
    pub scheduler: SchedulerSection,
    #[serde(default)]
    pub simulation: SimulationSection,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// A parsed config plus the directory its relative paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: ProjectConfig,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        let config: ProjectConfig = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let loaded = Self { config, base_dir };
        loaded.validate()?;
        Ok(loaded)
    }

    pub fn new(config: ProjectConfig, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let loaded = Self {
            config,
            base_dir: base_dir.into(),
        };
        loaded.validate()?;
        Ok(loaded)
    }

    /// Everything checkable without training: schema, ranges, referenced files.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        self.pool_config().validate()?;
        let spec = self.network()?;
        if let DatasetSection::Generator(g) = &c.dataset {
            if spec.input_shape != g.shape() || spec.class_count != g.classes {
                return Err(Error::InvalidConfig(format!(
                    "network expects {} over {} classes, generator makes {} over {}",
                    spec.input_shape,
                    spec.class_count,
                    g.shape(),
                    g.classes
                )));
            }
        }
        if let DatasetSection::Csv {
            train, eval, test, ..
        } = &c.dataset
        {
            for p in [train, eval, test] {
                let p = resolve(&self.base_dir, p);
                if !p.is_file() {
                    return Err(Error::InvalidConfig(format!(
                        "dataset file {} not found",
                        p.display()
                    )));
                }
            }
        }
        c.energy.capacitor.validate()?;
        c.energy.cost.validate()?;
        if let Some(t) = c.energy.power_thresholds {
            PowerThresholds::new(t.t1, t.t2)?;
        }
        for t in std::iter::once(&c.energy.trace).chain(c.scheduler.trace.as_ref()) {
            if let TraceSection::File { path, .. } = t {
                let p = resolve(&self.base_dir, path);
                if !p.is_file() {
                    return Err(Error::InvalidConfig(format!(
                        "trace file {} not found",
                        p.display()
                    )));
                }
            }
        }
        c.scheduler.hyperparameters.validate()?;
        if !(c.scheduler.clip_s > 0.0) {
            return Err(Error::InvalidConfig(
                "scheduler.clip_s must be positive".into(),
            ));
        }
        if !(c.energy.request_period_s > 0.0) {
            return Err(Error::InvalidConfig(
                "energy.request_period_s must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Replaces the pool, scheduler and simulation seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.config.pool.seed = seed;
        self.config.scheduler.seed = seed;
        self.config.simulation.seed = seed;
        self
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        resolve(&self.base_dir, p)
    }

    pub fn network(&self) -> Result<NetworkSpec> {
        NetworkSpec::from_json_file(self.path(&self.config.network))
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match &self.config.dataset {
            DatasetSection::Generator(g) => g.generate(),
            DatasetSection::Csv {
                shape,
                class_count,
                train,
                eval,
                test,
            } => Dataset::from_csv(
                *shape,
                *class_count,
                self.path(train),
                self.path(eval),
                self.path(test),
            ),
        }
    }

    pub fn pool_config(&self) -> PoolConfig {
        let p = &self.config.pool;
        PoolConfig {
            pool_size: p.pool_size,
            ensemble_size: self.config.ensemble.size,
            boost_learning_rate: p.boost_learning_rate,
            prune: p.prune.clone(),
            training: p.training.clone(),
            seed: p.seed,
        }
    }

    pub fn eval_trace(&self) -> Result<PowerTrace> {
        self.config.energy.trace.load(&self.base_dir)
    }

    pub fn training_trace(&self) -> Result<PowerTrace> {
        self.config
            .scheduler
            .trace
            .as_ref()
            .unwrap_or(&self.config.energy.trace)
            .load(&self.base_dir)
    }

    pub fn sim_config(&self) -> SimConfig {
        let c = &self.config;
        SimConfig {
            capacitor: c.energy.capacitor.clone(),
            cost: c.energy.cost.clone(),
            request_period_s: c.energy.request_period_s,
            duration_s: c.simulation.duration_s,
            initial_voltage: c.simulation.initial_voltage,
            retrain: c.simulation.retrain,
            retrain_learning_rate: c.simulation.retrain_learning_rate,
            power_thresholds: c.energy.power_thresholds,
            seed: c.simulation.seed,
        }
    }
}
