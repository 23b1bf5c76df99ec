//! Iterative L2-norm filter pruning down to a MAC budget.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{
    FilterBank, FilterGroup, LayerParams, LayerSpec, NetworkSpec, TrainConfig, WeakLearner,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSchedule {
    /// Fraction of the original MACs to keep, `1/N`.
    pub target_mac_fraction: f64,
    #[serde(default = "default_step")]
    pub filters_removed_per_step: usize,
    #[serde(default = "default_retrain")]
    pub retrain_epochs_per_step: usize,
}

fn default_step() -> usize {
    1
}
fn default_retrain() -> usize {
    2
}

impl PruneSchedule {
    pub fn for_ensemble_size(n: usize) -> Self {
        Self {
            target_mac_fraction: 1.0 / n as f64,
            filters_removed_per_step: default_step(),
            retrain_epochs_per_step: default_retrain(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_mac_fraction > 0.0 && self.target_mac_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "target_mac_fraction must be in (0, 1], got {}",
                self.target_mac_fraction
            )));
        }
        if self.filters_removed_per_step == 0 {
            return Err(Error::InvalidConfig(
                "filters_removed_per_step must be positive".into(),
            ));
        }
        Ok(())
    }

    /// `ceil(target_mac_fraction * macs)`.
    pub fn target_macs(&self, macs: u64) -> u64 {
        (self.target_mac_fraction * macs as f64).ceil() as u64
    }
}

/// L2 norms of one filter bank's filters, ascending (ties: lower index first).
#[derive(Debug, Clone, PartialEq)]
pub struct FilterRanking {
    pub group: FilterGroup,
    pub norms: Vec<(usize, f64)>,
}

/// Filter indices to remove, per filter bank.
pub type Victims = BTreeMap<FilterGroup, Vec<usize>>;

pub fn rank_filters(learner: &WeakLearner) -> Vec<FilterRanking> {
    let mut rankings = Vec::new();
    for (group, count) in learner.spec.filter_groups() {
        let norm_sq: Box<dyn Fn(usize) -> f64> =
            match (&learner.params.layers[group.layer], group.bank) {
                (LayerParams::Conv(p), FilterBank::Conv) => Box::new(move |f| p.filter_norm_sq(f)),
                (LayerParams::Residual { conv1, .. }, FilterBank::ResidualMid) => {
                    Box::new(move |f| conv1.filter_norm_sq(f))
                }
                // matched pair: the block output filter spans both branches
                (LayerParams::Residual { conv2, proj, .. }, FilterBank::ResidualOut) => {
                    Box::new(move |f| conv2.filter_norm_sq(f) + proj.filter_norm_sq(f))
                }
                _ => continue,
            };
        let mut norms: Vec<(usize, f64)> = (0..count).map(|f| (f, norm_sq(f).sqrt())).collect();
        norms.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        rankings.push(FilterRanking { group, norms });
    }
    rankings
}

fn keep_list(count: usize, removed: &[usize]) -> Vec<usize> {
    (0..count).filter(|f| !removed.contains(f)).collect()
}

/// Index of the layer that consumes `layer`'s output channels, skipping pools.
fn consumer(spec: &NetworkSpec, layer: usize) -> Option<usize> {
    (layer + 1..spec.layers.len()).find(|&j| !matches!(spec.layers[j], LayerSpec::AvgPool { .. }))
}

/// Removes the given filters and the matching input-channel slices of the
/// layers they feed. Surviving parameters are copied unchanged.
pub fn prune_step(learner: &WeakLearner, victims: &Victims) -> Result<WeakLearner> {
    if victims.values().all(|v| v.is_empty()) {
        return Ok(learner.clone());
    }
    let inputs = learner.spec.layer_inputs()?;
    let groups: BTreeMap<FilterGroup, usize> = learner.spec.filter_groups().into_iter().collect();
    let mut spec = learner.spec.clone();
    let mut params = learner.params.clone();

    for (&group, removed) in victims {
        if removed.is_empty() {
            continue;
        }
        let count = *groups
            .get(&group)
            .ok_or_else(|| Error::InvalidInput(format!("{group} is not a prunable filter bank")))?;
        let mut sorted = removed.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != removed.len() || sorted.iter().any(|&f| f >= count) {
            return Err(Error::InvalidInput(format!(
                "invalid victim list {removed:?} for {group} with {count} filters"
            )));
        }
        if sorted.len() >= count {
            return Err(Error::BudgetInfeasible {
                layer: group.layer,
                reason: format!("cannot remove all {count} filters of {group}"),
            });
        }
        let keep = keep_list(count, &sorted);
        spec = spec.with_filters_removed(group, sorted.len())?;

        match (&mut params.layers[group.layer], group.bank) {
            (LayerParams::Conv(p), FilterBank::Conv) => *p = p.retain_filters(&keep),
            (LayerParams::Residual { conv1, conv2, .. }, FilterBank::ResidualMid) => {
                *conv1 = conv1.retain_filters(&keep);
                *conv2 = conv2.retain_inputs(&keep);
                continue;
            }
            (LayerParams::Residual { conv2, proj, .. }, FilterBank::ResidualOut) => {
                *conv2 = conv2.retain_filters(&keep);
                *proj = proj.retain_filters(&keep);
            }
            _ => {
                return Err(Error::InvalidInput(format!(
                    "{group} does not match its parameters"
                )))
            }
        }

        let next = consumer(&learner.spec, group.layer)
            .ok_or_else(|| Error::InvalidSpec(format!("{group} feeds no layer")))?;
        match &mut params.layers[next] {
            LayerParams::Conv(p) => *p = p.retain_inputs(&keep),
            LayerParams::Residual { conv1, proj, .. } => {
                *conv1 = conv1.retain_inputs(&keep);
                *proj = proj.retain_inputs(&keep);
            }
            LayerParams::Dense(p) => {
                // flattened CHW input: each channel owns a contiguous block
                let hw = inputs[next].spatial();
                let columns: Vec<usize> = keep.iter().flat_map(|&c| c * hw..(c + 1) * hw).collect();
                *p = p.retain_inputs(&columns);
            }
            LayerParams::None => {
                return Err(Error::InvalidSpec(format!(
                    "{group} feeds a parameterless layer"
                )))
            }
        }
    }

    let mut pruned = WeakLearner::new(learner.id.clone(), spec, params)?;
    pruned.eval_accuracy = learner.eval_accuracy;
    Ok(pruned)
}

/// Picks the globally lowest-norm filters, at most `max_count` of them, never
/// emptying a bank, and stops early once the spec fits `target_macs`.
pub fn select_victims(
    learner: &WeakLearner,
    max_count: usize,
    target_macs: u64,
) -> Result<Victims> {
    let rankings = rank_filters(learner);
    let mut candidates: Vec<(f64, FilterGroup, usize)> = rankings
        .iter()
        .flat_map(|r| r.norms.iter().map(move |&(f, n)| (n, r.group, f)))
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut remaining: BTreeMap<FilterGroup, usize> =
        rankings.iter().map(|r| (r.group, r.norms.len())).collect();
    let mut victims = Victims::new();
    let mut spec = learner.spec.clone();
    let mut taken = 0;
    for (_, group, filter) in candidates {
        if taken == max_count {
            break;
        }
        let left = remaining.get_mut(&group).expect("ranked group");
        if *left <= 1 {
            continue;
        }
        *left -= 1;
        victims.entry(group).or_default().push(filter);
        spec = spec.with_filters_removed(group, 1)?;
        taken += 1;
        if spec.count_macs()? <= target_macs {
            break;
        }
    }
    Ok(victims)
}

/// Spec with every filter bank reduced to a single filter.
fn minimal_spec(spec: &NetworkSpec) -> Result<NetworkSpec> {
    let mut min = spec.clone();
    for (group, count) in spec.filter_groups() {
        if count > 1 {
            min = min.with_filters_removed(group, count - 1)?;
        }
    }
    Ok(min)
}

/// Largest MAC reduction obtainable by removing one filter from any bank of
/// `spec` (includes the downstream input-channel savings).
pub fn max_single_filter_macs(spec: &NetworkSpec) -> Result<u64> {
    let total = spec.count_macs()?;
    let mut best = 0;
    for (group, count) in spec.filter_groups() {
        if count > 1 {
            best = best.max(total - spec.with_filters_removed(group, 1)?.count_macs()?);
        }
    }
    Ok(best)
}

/// Prunes and retrains until `count_macs <= ceil(fraction * original)`.
pub fn prune_to_budget(
    learner: &WeakLearner,
    dataset: &Dataset,
    sample_weights: &[f64],
    schedule: &PruneSchedule,
    train: &TrainConfig,
    seed: u64,
) -> Result<WeakLearner> {
    schedule.validate()?;
    let target = schedule.target_macs(learner.macs);
    if learner.macs <= target {
        return Ok(learner.clone());
    }
    let min = minimal_spec(&learner.spec)?;
    if min.count_macs()? > target {
        let per_layer = min.layer_macs()?;
        let layer = per_layer
            .iter()
            .enumerate()
            .max_by_key(|&(i, m)| (*m, std::cmp::Reverse(i)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        return Err(Error::BudgetInfeasible {
            layer,
            reason: format!(
                "even one filter per bank needs {} MACs, budget is {target}",
                min.count_macs()?
            ),
        });
    }

    let retrain = TrainConfig {
        epochs: schedule.retrain_epochs_per_step,
        ..train.clone()
    };
    let mut current = learner.clone();
    let mut step = 0u64;
    while current.macs > target {
        let victims = select_victims(&current, schedule.filters_removed_per_step, target)?;
        let next = prune_step(&current, &victims)?;
        debug_assert!(next.macs < current.macs);
        current = next;
        if retrain.epochs > 0 {
            current = current
                .train(dataset, sample_weights, &retrain, seed.wrapping_add(step))?
                .0;
        }
        step += 1;
    }
    if retrain.epochs == 0 {
        current.refresh_eval_accuracy(dataset)?;
    }
    Ok(current)
}
