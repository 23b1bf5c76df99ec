//! Boosted candidate pool: train, prune to `1/N` MACs, reweight samples, repeat.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::{NetworkSpec, TrainConfig, WeakLearner};
use crate::prune::{prune_to_budget, PruneSchedule};
use crate::store::{self, FORMAT_VERSION};

/// Floor applied to the true-class probability inside the log.
pub const PROB_FLOOR: f64 = 1e-6;

/// Per-sample loss multipliers for the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleWeights {
    pub weights: Vec<f64>,
    pub generation: u32,
}

impl SampleWeights {
    /// All ones, generation 0.
    pub fn init(train_size: usize) -> Result<Self> {
        if train_size == 0 {
            return Err(Error::InvalidInput("training split is empty".into()));
        }
        Ok(Self {
            weights: vec![1.0; train_size],
            generation: 0,
        })
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().sum::<f64>() / self.weights.len() as f64
    }

    /// Rescales so the mean weight is 1.
    pub fn normalize(&mut self) {
        let mean = self.mean();
        self.weights.iter_mut().for_each(|w| *w /= mean);
    }
}

/// `exp(-alpha * ln p_true)`, with `p_true` floored at [`PROB_FLOOR`].
pub fn weight_multiplier(p_true: f64, alpha: f64) -> f64 {
    (-alpha * p_true.max(PROB_FLOOR).ln()).exp()
}

/// Multiplies every training-sample weight by `p_true^-alpha` under `learner`,
/// without normalising.
pub fn reweight_unnormalized(
    w: &SampleWeights,
    learner: &WeakLearner,
    dataset: &Dataset,
    alpha: f64,
) -> Result<SampleWeights> {
    let train = dataset.split(Split::Train);
    if w.weights.len() != train.len() {
        return Err(Error::InvalidInput(
            "sample weights do not match the training split".into(),
        ));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "boost learning rate must be non-negative, got {alpha}"
        )));
    }
    let mut weights = Vec::with_capacity(train.len());
    for (s, &wi) in train.iter().zip(&w.weights) {
        let p = learner.forward(&s.input)?[s.label];
        weights.push(wi * weight_multiplier(p, alpha));
    }
    Ok(SampleWeights {
        weights,
        generation: w.generation + 1,
    })
}

/// Boosting weight update followed by mean-one normalisation.
pub fn update_weights(
    w: &SampleWeights,
    learner: &WeakLearner,
    dataset: &Dataset,
    alpha: f64,
) -> Result<SampleWeights> {
    let mut next = reweight_unnormalized(w, learner, dataset, alpha)?;
    next.normalize();
    Ok(next)
}

/// Filter-removal granularity; the MAC target comes from the ensemble size
/// unless overridden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSettings {
    #[serde(default)]
    pub target_mac_fraction: Option<f64>,
    #[serde(default = "one")]
    pub filters_removed_per_step: usize,
    #[serde(default = "two")]
    pub retrain_epochs_per_step: usize,
}

fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn default_alpha() -> f64 {
    0.5
}

impl Default for PruneSettings {
    fn default() -> Self {
        Self {
            target_mac_fraction: None,
            filters_removed_per_step: one(),
            retrain_epochs_per_step: two(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    /// M: candidates to build.
    pub pool_size: usize,
    /// N: learners kept in the ensemble; also sets the `1/N` MAC budget.
    pub ensemble_size: usize,
    #[serde(default = "default_alpha")]
    pub boost_learning_rate: f64,
    #[serde(default)]
    pub prune: PruneSettings,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub seed: u64,
}

impl PoolConfig {
    pub fn schedule(&self) -> PruneSchedule {
        PruneSchedule {
            target_mac_fraction: self
                .prune
                .target_mac_fraction
                .unwrap_or(1.0 / self.ensemble_size.max(1) as f64),
            filters_removed_per_step: self.prune.filters_removed_per_step,
            retrain_epochs_per_step: self.prune.retrain_epochs_per_step,
        }
    }

    /// Full configuration contract: `M > N`, `2 <= N <= 5`, `alpha > 0`.
    pub fn validate(&self) -> Result<()> {
        if !(2..=5).contains(&self.ensemble_size) {
            return Err(Error::InvalidConfig(format!(
                "ensemble_size must be in [2, 5], got {}",
                self.ensemble_size
            )));
        }
        if self.pool_size <= self.ensemble_size {
            return Err(Error::InvalidConfig(format!(
                "pool_size ({}) must exceed ensemble_size ({})",
                self.pool_size, self.ensemble_size
            )));
        }
        self.validate_runnable()
    }

    /// What `build_pool` itself needs; allows degenerate pools for experiments.
    fn validate_runnable(&self) -> Result<()> {
        if self.pool_size == 0 || self.ensemble_size == 0 {
            return Err(Error::InvalidConfig(
                "pool_size and ensemble_size must be positive".into(),
            ));
        }
        if !(self.boost_learning_rate > 0.0 && self.boost_learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(
                "boost_learning_rate must be positive".into(),
            ));
        }
        if self.training.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "training.batch_size must be positive".into(),
            ));
        }
        self.schedule().validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    pub learners: Vec<WeakLearner>,
    /// Weight generation each learner was trained under (`m - 1` for learner m).
    pub generations: Vec<u32>,
    pub final_weights: SampleWeights,
    pub baseline_macs: u64,
    pub baseline_params: u64,
}

/// Trains one fresh learner under `weights` and prunes it to the budget.
pub fn build_learner(
    id: String,
    base_spec: &NetworkSpec,
    dataset: &Dataset,
    weights: &[f64],
    cfg: &PoolConfig,
    seed: u64,
) -> Result<WeakLearner> {
    let fresh = WeakLearner::init(id, base_spec.clone(), seed)?;
    let (trained, _) = fresh.train(dataset, weights, &cfg.training, seed)?;
    prune_to_budget(
        &trained,
        dataset,
        weights,
        &cfg.schedule(),
        &cfg.training,
        seed,
    )
}

pub fn build_pool(base_spec: &NetworkSpec, dataset: &Dataset, cfg: &PoolConfig) -> Result<Pool> {
    cfg.validate_runnable()?;
    base_spec.validate()?;
    if base_spec.input_shape != dataset.shape || base_spec.class_count != dataset.class_count {
        return Err(Error::InvalidConfig(format!(
            "network expects {} inputs over {} classes, dataset has {} over {}",
            base_spec.input_shape, base_spec.class_count, dataset.shape, dataset.class_count
        )));
    }
    let mut weights = SampleWeights::init(dataset.train.len())?;
    let mut learners = Vec::with_capacity(cfg.pool_size);
    let mut generations = Vec::with_capacity(cfg.pool_size);
    for m in 0..cfg.pool_size {
        let seed = cfg.seed.wrapping_add(m as u64);
        let learner = build_learner(
            format!("learner-{m:02}"),
            base_spec,
            dataset,
            &weights.weights,
            cfg,
            seed,
        )
        .map_err(|e| e.for_learner(m))?;
        log::info!(
            "learner {m}: {} MACs, {} params, eval accuracy {:.3}",
            learner.macs,
            learner.param_count(),
            learner.eval_accuracy
        );
        generations.push(weights.generation);
        weights = update_weights(&weights, &learner, dataset, cfg.boost_learning_rate)
            .map_err(|e| e.for_learner(m))?;
        learners.push(learner);
    }
    Ok(Pool {
        learners,
        generations,
        final_weights: weights,
        baseline_macs: base_spec.count_macs()?,
        baseline_params: base_spec.param_count()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolEntry {
    pub id: String,
    pub file: String,
    pub macs: u64,
    pub param_count: u64,
    pub eval_accuracy: f64,
    pub generation: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolManifest {
    pub version: u32,
    pub baseline_macs: u64,
    pub baseline_params: u64,
    pub learners: Vec<PoolEntry>,
    pub final_weight_generation: u32,
}

pub const POOL_MANIFEST: &str = "manifest.json";

impl Pool {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.learners.len());
        for (m, (l, g)) in self.learners.iter().zip(&self.generations).enumerate() {
            let stem = format!("learner_{m:02}");
            store::save_learner(l, dir, &stem)?;
            entries.push(PoolEntry {
                id: l.id.clone(),
                file: format!("{stem}.json"),
                macs: l.macs,
                param_count: l.param_count(),
                eval_accuracy: l.eval_accuracy,
                generation: *g,
            });
        }
        let manifest = PoolManifest {
            version: FORMAT_VERSION,
            baseline_macs: self.baseline_macs,
            baseline_params: self.baseline_params,
            learners: entries,
            final_weight_generation: self.final_weights.generation,
        };
        store::write_json(&dir.join(POOL_MANIFEST), &manifest)
    }

    /// Loads learners and manifest; final sample weights are not persisted.
    pub fn load(dir: &Path) -> Result<(PoolManifest, Vec<WeakLearner>)> {
        let manifest: PoolManifest = store::read_json(&dir.join(POOL_MANIFEST))?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::Load {
                path: dir.join(POOL_MANIFEST),
                message: format!("unsupported pool format version {}", manifest.version),
            });
        }
        let learners = manifest
            .learners
            .iter()
            .map(|e| store::load_learner(&dir.join(&e.file)))
            .collect::<Result<Vec<_>>>()?;
        Ok((manifest, learners))
    }
}
