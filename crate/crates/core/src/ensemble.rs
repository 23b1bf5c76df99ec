//! Weighted-vote ensembles chosen from a candidate pool by greedy selection
//! plus swap-based backfitting.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::{argmax, WeakLearner};
use crate::store::{self, FORMAT_VERSION};

/// Clamp applied to error rates before taking the log-odds.
pub const ERROR_CLAMP: f64 = 1e-4;

/// `0.5 * ln((1 - e) / e)` with `e` clamped into `[1e-4, 1 - 1e-4]`.
pub fn learner_weight(error_rate: f64) -> f64 {
    let e = error_rate.clamp(ERROR_CLAMP, 1.0 - ERROR_CLAMP);
    0.5 * ((1.0 - e) / e).ln()
}

/// `argmax_c sum_m a_m f_m(x)_c`; ties go to the lowest class index.
pub fn weighted_vote<P: AsRef<[f64]>>(outputs: &[P], weights: &[f64]) -> Result<(usize, Vec<f64>)> {
    if outputs.is_empty() || outputs.len() != weights.len() {
        return Err(Error::InvalidInput(format!(
            "{} learner outputs for {} vote weights",
            outputs.len(),
            weights.len()
        )));
    }
    let classes = outputs[0].as_ref().len();
    let mut scores = vec![0.0; classes];
    for (out, a) in outputs.iter().zip(weights) {
        let out = out.as_ref();
        if out.len() != classes {
            return Err(Error::InvalidInput(
                "learner outputs disagree on class count".into(),
            ));
        }
        for (s, p) in scores.iter_mut().zip(out) {
            *s += a * p;
        }
    }
    Ok((argmax(&scores), scores))
}

/// Per-learner output probabilities on a fixed sample set, computed once so
/// subset search never reruns a network.
#[derive(Debug, Clone)]
pub struct Predictions {
    /// `probs[m][i]` is learner m's output on sample i.
    pub probs: Vec<Vec<Vec<f64>>>,
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
    pub accuracies: Vec<f64>,
}

impl Predictions {
    pub fn compute(learners: &[WeakLearner], samples: &[Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput(
                "selection needs a non-empty eval split".into(),
            ));
        }
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let mut probs = Vec::with_capacity(learners.len());
        for (m, l) in learners.iter().enumerate() {
            let p = samples
                .iter()
                .map(|s| l.forward(&s.input))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.for_learner(m))?;
            probs.push(p);
        }
        Ok(Self::from_probs(probs, labels))
    }

    pub fn from_probs(probs: Vec<Vec<Vec<f64>>>, labels: Vec<usize>) -> Self {
        let accuracies: Vec<f64> = probs
            .iter()
            .map(|p| {
                let hits = p
                    .iter()
                    .zip(&labels)
                    .filter(|(o, &y)| argmax(o) == y)
                    .count();
                hits as f64 / labels.len() as f64
            })
            .collect();
        let weights = accuracies.iter().map(|a| learner_weight(1.0 - a)).collect();
        Self {
            probs,
            labels,
            weights,
            accuracies,
        }
    }

    pub fn pool_size(&self) -> usize {
        self.probs.len()
    }

    /// Weighted-vote accuracy of the learners in `subset`.
    pub fn subset_accuracy(&self, subset: &[usize]) -> f64 {
        if subset.is_empty() {
            return 0.0;
        }
        let classes = self.probs[subset[0]].first().map_or(0, Vec::len);
        let mut scores = vec![0.0; classes];
        let mut hits = 0usize;
        for (i, &y) in self.labels.iter().enumerate() {
            scores.iter_mut().for_each(|s| *s = 0.0);
            for &m in subset {
                let a = self.weights[m];
                for (s, p) in scores.iter_mut().zip(&self.probs[m][i]) {
                    *s += a * p;
                }
            }
            if argmax(&scores) == y {
                hits += 1;
            }
        }
        hits as f64 / self.labels.len() as f64
    }
}

/// Forward greedy: repeatedly add the candidate that maximises subset
/// accuracy (ties: lowest pool index).
pub fn greedy_select(pred: &Predictions, n: usize) -> Result<Vec<usize>> {
    check_sizes(pred.pool_size(), n)?;
    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    while chosen.len() < n {
        let mut best: Option<(usize, f64)> = None;
        let outsiders: Vec<usize> = (0..pred.pool_size())
            .filter(|c| !chosen.contains(c))
            .collect();
        for c in outsiders {
            chosen.push(c);
            let acc = pred.subset_accuracy(&chosen);
            chosen.pop();
            if best.is_none_or(|(_, b)| acc > b) {
                best = Some((c, acc));
            }
        }
        chosen.push(best.expect("pool larger than selection").0);
    }
    Ok(chosen)
}

/// Greedy selection followed by swap passes: each pass tries replacing every
/// member with every outsider and keeps strict improvements only, so the
/// result is never worse than greedy. At most `M * N` passes.
pub fn backfit_select(pred: &Predictions, n: usize) -> Result<Vec<usize>> {
    let mut chosen = greedy_select(pred, n)?;
    let mut current = pred.subset_accuracy(&chosen);
    let max_passes = pred.pool_size() * n;
    for _ in 0..max_passes {
        let mut improved = false;
        for pos in 0..n {
            let mut best: Option<(usize, f64)> = None;
            for c in (0..pred.pool_size()).filter(|c| !chosen.contains(c)) {
                let mut trial = chosen.clone();
                trial[pos] = c;
                let acc = pred.subset_accuracy(&trial);
                if acc > best.map_or(current, |(_, b)| b) {
                    best = Some((c, acc));
                }
            }
            if let Some((c, acc)) = best {
                chosen[pos] = c;
                current = acc;
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
    Ok(chosen)
}

fn check_sizes(pool: usize, n: usize) -> Result<()> {
    if n == 0 || n > pool {
        return Err(Error::InvalidConfig(format!(
            "cannot select {n} learners from a pool of {pool}"
        )));
    }
    Ok(())
}

/// Orders selected indices by individual eval accuracy, best first
/// (ties: lower pool index).
pub fn execution_order(pred: &Predictions, selected: &[usize]) -> Vec<usize> {
    let mut order = selected.to_vec();
    order.sort_by(|&a, &b| {
        pred.accuracies[b]
            .total_cmp(&pred.accuracies[a])
            .then(a.cmp(&b))
    });
    order
}

/// `acc[k]` for `k = 0..=N` over an ordered member list; `acc[0]` is chance.
pub fn profile_accuracy(pred: &Predictions, ordered: &[usize], class_count: usize) -> Vec<f64> {
    let mut acc = vec![1.0 / class_count as f64];
    for k in 1..=ordered.len() {
        acc.push(pred.subset_accuracy(&ordered[..k]));
    }
    acc
}

/// Selected learners in execution order with their vote weights and the
/// accuracy each prefix achieves.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub learners: Vec<WeakLearner>,
    /// Pool index of each member.
    pub pool_indices: Vec<usize>,
    pub vote_weights: Vec<f64>,
    /// `acc[k]`, `k = 0..=N`.
    pub accuracy_profile: Vec<f64>,
    pub baseline_macs: u64,
}

impl Ensemble {
    pub fn select(
        pool: &[WeakLearner],
        eval: &[Sample],
        n: usize,
        baseline_macs: u64,
    ) -> Result<Self> {
        let pred = Predictions::compute(pool, eval)?;
        let chosen = backfit_select(&pred, n)?;
        let ordered = execution_order(&pred, &chosen);
        let class_count = pool[0].class_count();
        if ordered.iter().all(|&m| pred.weights[m] <= 0.0) {
            log::warn!("every selected learner is at or below 50% eval accuracy; vote weights are non-positive");
        }
        Ok(Self {
            learners: ordered.iter().map(|&m| pool[m].clone()).collect(),
            vote_weights: ordered.iter().map(|&m| pred.weights[m]).collect(),
            accuracy_profile: profile_accuracy(&pred, &ordered, class_count),
            pool_indices: ordered,
            baseline_macs,
        })
    }

    pub fn len(&self) -> usize {
        self.learners.len()
    }

    pub fn is_empty(&self) -> bool {
        self.learners.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.learners.first().map_or(0, WeakLearner::class_count)
    }

    /// `delta_acc[k] = acc[k] - acc[k - 1]` for `k = 1..=N` (index 0 unused, 0.0).
    pub fn delta_accuracy(&self) -> Vec<f64> {
        let mut d = vec![0.0];
        d.extend(self.accuracy_profile.windows(2).map(|w| w[1] - w[0]));
        d
    }

    pub fn total_macs(&self) -> u64 {
        self.learners.iter().map(|l| l.macs).sum()
    }

    pub fn prefix_macs(&self, k: usize) -> u64 {
        self.learners.iter().take(k).map(|l| l.macs).sum()
    }

    /// Weighted vote of the first `k` members.
    pub fn predict_prefix(&self, input: &[f64], k: usize) -> Result<(usize, Vec<f64>)> {
        if k == 0 || k > self.len() {
            return Err(Error::InvalidInput(format!(
                "prefix length {k} outside 1..={}",
                self.len()
            )));
        }
        let outputs = self.learners[..k]
            .iter()
            .map(|l| l.forward(input))
            .collect::<Result<Vec<_>>>()?;
        weighted_vote(&outputs, &self.vote_weights[..k])
    }

    pub fn predict(&self, input: &[f64]) -> Result<usize> {
        Ok(self.predict_prefix(input, self.len())?.0)
    }

    pub fn accuracy(&self, samples: &[Sample], k: usize) -> Result<f64> {
        if samples.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0;
        for s in samples {
            if self.predict_prefix(&s.input, k)?.0 == s.label {
                hits += 1;
            }
        }
        Ok(hits as f64 / samples.len() as f64)
    }

    /// Writes member learners plus `ensemble.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let mut members = Vec::with_capacity(self.len());
        for (k, (l, (&pool_index, &w))) in self
            .learners
            .iter()
            .zip(self.pool_indices.iter().zip(&self.vote_weights))
            .enumerate()
        {
            let stem = format!("member_{k}");
            store::save_learner(l, dir, &stem)?;
            members.push(MemberEntry {
                file: format!("{stem}.json"),
                pool_index,
                vote_weight: w,
                macs: l.macs,
                eval_accuracy: l.eval_accuracy,
            });
        }
        let manifest = EnsembleManifest {
            version: FORMAT_VERSION,
            ensemble_size: self.len(),
            class_count: self.class_count(),
            members,
            accuracy_profile: self.accuracy_profile.clone(),
            delta_accuracy: self.delta_accuracy(),
            baseline_macs: self.baseline_macs,
            total_macs: self.total_macs(),
        };
        let path = dir.join(ENSEMBLE_MANIFEST);
        store::write_json(&path, &manifest)?;
        Ok(path)
    }

    /// Accepts either the manifest file or the directory holding it.
    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() {
            path.join(ENSEMBLE_MANIFEST)
        } else {
            path.to_path_buf()
        };
        let manifest: EnsembleManifest = store::read_json(&path)?;
        let fail = |message: String| Error::Load {
            path: path.clone(),
            message,
        };
        if manifest.version != FORMAT_VERSION {
            return Err(fail(format!(
                "unsupported ensemble format version {}",
                manifest.version
            )));
        }
        if manifest.members.len() != manifest.ensemble_size
            || manifest.accuracy_profile.len() != manifest.ensemble_size + 1
        {
            return Err(fail("member count disagrees with ensemble_size".into()));
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        let learners = manifest
            .members
            .iter()
            .map(|m| store::load_learner(&dir.join(&m.file)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            learners,
            pool_indices: manifest.members.iter().map(|m| m.pool_index).collect(),
            vote_weights: manifest.members.iter().map(|m| m.vote_weight).collect(),
            accuracy_profile: manifest.accuracy_profile,
            baseline_macs: manifest.baseline_macs,
        })
    }
}

pub const ENSEMBLE_MANIFEST: &str = "ensemble.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberEntry {
    pub file: String,
    pub pool_index: usize,
    pub vote_weight: f64,
    pub macs: u64,
    pub eval_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleManifest {
    pub version: u32,
    pub ensemble_size: usize,
    pub class_count: usize,
    pub members: Vec<MemberEntry>,
    pub accuracy_profile: Vec<f64>,
    pub delta_accuracy: Vec<f64>,
    pub baseline_macs: u64,
    pub total_macs: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_values() {
        assert!(learner_weight(0.5).abs() < 1e-15);
        assert!((learner_weight(0.0) - 0.5 * (0.9999f64 / 0.0001).ln()).abs() < 1e-12);
        assert!(learner_weight(0.1) > learner_weight(0.2));
        assert!(learner_weight(0.7) < 0.0);
    }

    #[test]
    fn vote_matches_hand_computation() {
        let outs = [vec![0.6, 0.4], vec![0.3, 0.7]];
        // 1.0*0.6 + 0.5*0.3 = 0.75 vs 0.4 + 0.35 = 0.75: tie -> class 0
        let (c, s) = weighted_vote(&outs, &[1.0, 0.5]).unwrap();
        assert_eq!(c, 0);
        assert!((s[0] - s[1]).abs() < 1e-12);
        let (c, _) = weighted_vote(&outs, &[1.0, 1.0]).unwrap();
        assert_eq!(c, 1);
        assert!(weighted_vote(&outs, &[1.0]).is_err());
    }

    /// Three learners, four samples; learner 2 is individually worst but
    /// complements learner 0.
    fn toy() -> Predictions {
        let hot = |c: usize| {
            if c == 0 {
                vec![0.9, 0.1]
            } else {
                vec![0.1, 0.9]
            }
        };
        let labels = vec![0, 1, 0, 1];
        let preds = |v: [usize; 4]| v.iter().map(|&c| hot(c)).collect::<Vec<_>>();
        Predictions::from_probs(
            vec![
                preds([0, 1, 0, 0]),
                preds([0, 1, 1, 1]),
                preds([1, 1, 0, 1]),
            ],
            labels,
        )
    }

    #[test]
    fn greedy_and_backfit_on_toy() {
        let p = toy();
        assert_eq!(p.accuracies, vec![0.75, 0.75, 0.75]);
        let g = greedy_select(&p, 1).unwrap();
        assert_eq!(g, vec![0]);
        let b = backfit_select(&p, 2).unwrap();
        assert!(p.subset_accuracy(&b) >= p.subset_accuracy(&greedy_select(&p, 2).unwrap()));
        assert!(backfit_select(&p, 4).is_err());
    }

    #[test]
    fn profile_starts_at_chance() {
        let p = toy();
        let prof = profile_accuracy(&p, &[0, 1], 2);
        assert_eq!(prof[0], 0.5);
        assert_eq!(prof.len(), 3);
        assert_eq!(prof[1], 0.75);
    }
}
