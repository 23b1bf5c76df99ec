//! Minimal trainable CNN engine with per-sample weighted loss and MAC accounting.

mod engine;
mod params;
mod spec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use engine::{softmax, weighted_ce, ForwardTrace, Plan};
pub use params::{ConvParams, DenseParams, LayerParams, Parameters};
pub use spec::{Activation, FilterBank, FilterGroup, LayerSpec, NetworkSpec, TensorShape};

use crate::data::{Dataset, Sample, Split};
use crate::error::{Error, Result};

/// SGD hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_batch() -> usize {
    16
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 0.05,
            batch_size: default_batch(),
        }
    }
}

/// A network spec plus trained parameters.
#[derive(Debug, Clone)]
pub struct WeakLearner {
    pub id: String,
    pub spec: NetworkSpec,
    pub params: Parameters,
    pub macs: u64,
    pub eval_accuracy: f64,
    plan: Plan,
}

impl PartialEq for WeakLearner {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.spec == other.spec
            && self.params == other.params
            && self.macs == other.macs
            && self.eval_accuracy.to_bits() == other.eval_accuracy.to_bits()
    }
}

impl WeakLearner {
    pub fn new(id: impl Into<String>, spec: NetworkSpec, params: Parameters) -> Result<Self> {
        let plan = Plan::new(&spec)?;
        params.check_shapes(&spec)?;
        let macs = spec.count_macs()?;
        Ok(Self {
            id: id.into(),
            spec,
            params,
            macs,
            eval_accuracy: 0.0,
            plan,
        })
    }

    /// Fresh He-initialised learner.
    pub fn init(id: impl Into<String>, spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Parameters::random(&spec, &mut rng)?;
        Self::new(id, spec, params)
    }

    pub fn param_count(&self) -> u64 {
        self.params.len() as u64
    }

    pub fn class_count(&self) -> usize {
        self.spec.class_count
    }

    /// Class probabilities for one input.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(input)?.outputs.pop().unwrap_or_default())
    }

    pub fn trace(&self, input: &[f64]) -> Result<ForwardTrace> {
        engine::forward_trace(&self.spec, &self.plan, &self.params, input)
    }

    pub fn predict(&self, input: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(input)?))
    }

    pub fn accuracy(&self, samples: &[Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0usize;
        for s in samples {
            if self.predict(&s.input)? == s.label {
                correct += 1;
            }
        }
        Ok(correct as f64 / samples.len() as f64)
    }

    pub fn refresh_eval_accuracy(&mut self, dataset: &Dataset) -> Result<()> {
        self.eval_accuracy = self.accuracy(dataset.split(Split::Eval))?;
        Ok(())
    }

    /// Weighted mean cross-entropy and its parameter gradient over `samples`.
    /// Gradients of layers before `first_layer` are left at zero.
    fn loss_and_grad(
        &self,
        samples: &[&Sample],
        weights: &[f64],
        first_layer: usize,
    ) -> Result<(f64, Parameters, Vec<Vec<f64>>)> {
        let mut grads = self.params.zeros_like();
        let scale = 1.0 / samples.len() as f64;
        let mut loss = 0.0;
        let mut outputs = Vec::with_capacity(samples.len());
        for (s, &w) in samples.iter().zip(weights) {
            let trace = self.trace(&s.input)?;
            let (l, d) = weighted_ce(trace.probabilities(), s.label, w * scale);
            loss += l;
            engine::backward(
                &self.spec,
                &self.plan,
                &self.params,
                &trace,
                &d,
                &mut grads,
                first_layer,
            );
            outputs.push(trace.probabilities().to_vec());
        }
        Ok((loss, grads, outputs))
    }

    /// Mini-batch SGD on the train split with per-sample loss weights.
    /// Returns the trained learner and the mean weighted loss of each epoch.
    pub fn train(
        &self,
        dataset: &Dataset,
        sample_weights: &[f64],
        cfg: &TrainConfig,
        seed: u64,
    ) -> Result<(WeakLearner, Vec<f64>)> {
        let train = dataset.split(Split::Train);
        if sample_weights.len() != train.len() {
            return Err(Error::InvalidInput(format!(
                "{} sample weights for {} training samples",
                sample_weights.len(),
                train.len()
            )));
        }
        if sample_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidInput(
                "sample weights must be finite and positive".into(),
            ));
        }
        if cfg.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        let mut learner = self.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut history = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
                let w: Vec<f64> = chunk.iter().map(|&i| sample_weights[i]).collect();
                let (loss, grads, _) = learner.loss_and_grad(&batch, &w, 0)?;
                if !loss.is_finite() {
                    return Err(Error::TrainingDiverged { epoch, loss });
                }
                epoch_loss += loss * chunk.len() as f64;
                learner.params.add_scaled(&grads, -cfg.learning_rate);
            }
            let mean = epoch_loss / train.len().max(1) as f64;
            if !mean.is_finite()
                || learner
                    .params
                    .tensors()
                    .iter()
                    .any(|t| t.iter().any(|v| !v.is_finite()))
            {
                return Err(Error::TrainingDiverged { epoch, loss: mean });
            }
            history.push(mean);
        }
        learner.refresh_eval_accuracy(dataset)?;
        Ok((learner, history))
    }

    /// One SGD step on the dense layers only. The returned outputs come from
    /// the same forward pass that produced the gradient, i.e. they equal
    /// [`forward`](Self::forward) on the pre-update parameters.
    pub fn train_fc_only(
        &self,
        batch: &[Sample],
        sample_weights: &[f64],
        learning_rate: f64,
    ) -> Result<(WeakLearner, Vec<Vec<f64>>)> {
        if batch.is_empty() {
            return Err(Error::InvalidInput(
                "train_fc_only needs a non-empty batch".into(),
            ));
        }
        if sample_weights.len() != batch.len() {
            return Err(Error::InvalidInput(
                "one weight per batch sample required".into(),
            ));
        }
        let first_dense = self
            .spec
            .first_dense_layer()
            .ok_or_else(|| Error::InvalidSpec("network has no dense layer".into()))?;
        let refs: Vec<&Sample> = batch.iter().collect();
        let (_, grads, outputs) = self.loss_and_grad(&refs, sample_weights, first_dense)?;
        let mut learner = self.clone();
        for (dst, src) in learner
            .params
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .skip(first_dense)
        {
            if let (LayerParams::Dense(p), LayerParams::Dense(g)) = (dst, src) {
                for (w, d) in p.weights.iter_mut().zip(&g.weights) {
                    *w -= learning_rate * d;
                }
                for (b, d) in p.bias.iter_mut().zip(&g.bias) {
                    *b -= learning_rate * d;
                }
            }
        }
        Ok((learner, outputs))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Compares backprop gradients against central finite differences (step
/// 1e-5) for a randomly initialised copy of `spec` on a few random samples.
///
/// Coordinates whose ±step perturbation flips any ReLU on/off are skipped,
/// since the loss is not differentiable there. Returns the maximum of
/// `|analytic - numeric| / max(|analytic| + |numeric|, 1e-6)`.
pub fn gradient_check(spec: &NetworkSpec, seed: u64) -> Result<f64> {
    const STEP: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let learner = WeakLearner::init("gradcheck", spec.clone(), seed)?;
    if learner.params.len() >= 10_000 {
        return Err(Error::InvalidInput(
            "gradient_check is limited to specs with < 10k parameters".into(),
        ));
    }
    let samples: Vec<Sample> = (0..3)
        .map(|_| Sample {
            input: (0..spec.input_shape.len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
            label: rng.random_range(0..spec.class_count),
        })
        .collect();
    let weights: Vec<f64> = (0..samples.len())
        .map(|_| rng.random_range(0.5..2.0))
        .collect();
    // randomise biases too so they are exercised
    let mut learner = learner;
    for layer in &mut learner.params.layers {
        match layer {
            LayerParams::Conv(p) => p
                .bias
                .iter_mut()
                .for_each(|b| *b = rng.random_range(-0.1..0.1)),
            LayerParams::Dense(p) => p
                .bias
                .iter_mut()
                .for_each(|b| *b = rng.random_range(-0.1..0.1)),
            LayerParams::Residual { conv1, conv2, proj } => {
                for p in [conv1, conv2, proj] {
                    p.bias
                        .iter_mut()
                        .for_each(|b| *b = rng.random_range(-0.1..0.1));
                }
            }
            LayerParams::None => {}
        }
    }
    Ok(compare_gradients(&learner, &samples, &weights, STEP)?.0)
}

/// Returns `(max relative error, coordinates checked)`.
pub(crate) fn compare_gradients(
    learner: &WeakLearner,
    samples: &[Sample],
    weights: &[f64],
    step: f64,
) -> Result<(f64, usize)> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let (_, grads, _) = learner.loss_and_grad(&refs, weights, 0)?;
    let analytic = grads.flatten();
    let base = learner.params.flatten();
    let loss_at = |values: &[f64]| -> Result<(f64, Vec<Vec<bool>>)> {
        let mut probe = learner.clone();
        probe.params = Parameters::from_flat(&learner.spec, values)?;
        let mut patterns = Vec::new();
        let mut loss = 0.0;
        for (s, &w) in samples.iter().zip(weights) {
            let trace = probe.trace(&s.input)?;
            loss += weighted_ce(trace.probabilities(), s.label, w / samples.len() as f64).0;
            patterns.push(trace.relu_pattern(&probe.spec));
        }
        Ok((loss, patterns))
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut values = base.clone();
    for i in 0..base.len() {
        values[i] = base[i] + step;
        let (plus, pat_plus) = loss_at(&values)?;
        values[i] = base[i] - step;
        let (minus, pat_minus) = loss_at(&values)?;
        values[i] = base[i];
        if pat_plus != pat_minus {
            continue;
        }
        let numeric = (plus - minus) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-6);
        worst = worst.max(err);
        checked += 1;
    }
    Ok((worst, checked))
}
