//! Episodic training: Nadam updates, the epoch loop, evaluation, and
//! best-validation model selection.

mod checkpoint;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episodes::{EpisodeSampler, SplitKind};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Graph, NormMode, ParamStore, Scalar, Tensor};

/// Nadam optimizer state: per-parameter moment buffers plus the shared
/// hyperparameters. Moment buffers are created on first use and must match
/// parameter shapes afterwards.
#[derive(Clone, Debug, PartialEq)]
pub struct NadamState<F: Scalar> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor<F>>,
    v: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> NadamState<F> {
    /// Standard moment defaults; only the learning rate is tuned.
    pub fn new(learning_rate: f64) -> Self {
        NadamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// (path, first moment, second moment) triples in path order.
    pub fn moments(&self) -> impl Iterator<Item = (&String, &Tensor<F>, &Tensor<F>)> {
        self.m.iter().map(|(path, m)| (path, m, &self.v[path]))
    }

    /// Rebuilds state from stored buffers; `m` and `v` must cover the same
    /// paths.
    pub fn from_parts(
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        step: u64,
        m: BTreeMap<String, Tensor<F>>,
        v: BTreeMap<String, Tensor<F>>,
    ) -> Result<Self> {
        if m.len() != v.len() || m.keys().zip(v.keys()).any(|(a, b)| a != b) {
            return Err(Error::invalid("NadamState::from_parts", "moment buffers cover different paths"));
        }
        Ok(NadamState { learning_rate, beta1, beta2, epsilon, step, m, v })
    }

    pub fn cast<G: Scalar>(&self) -> NadamState<G> {
        let lift = |map: &BTreeMap<String, Tensor<F>>| map.iter().map(|(k, t)| (k.clone(), t.cast())).collect();
        NadamState {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            step: self.step,
            m: lift(&self.m),
            v: lift(&self.v),
        }
    }
}

/// One Nadam update over every parameter in the store, consuming the
/// gradients written by the last backward pass.
///
/// m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g^2; with bias corrections
/// mhat = m/(1-b1^t), vhat = v/(1-b2^t) and the Nesterov lookahead
/// mbar = b1 mhat + (1-b1) g/(1-b1^t), the step is
/// theta <- theta - lr mbar / (sqrt(vhat) + eps).
pub fn nadam_step<F: Scalar>(params: &mut ParamStore<F>, state: &mut NadamState<F>) -> Result<()> {
    for (path, tensor) in params.iter() {
        if tensor.grad().is_none() {
            return Err(Error::MissingGradient(path.clone()));
        }
        if let Some(m) = state.m.get(path) {
            if m.shape() != tensor.shape() {
                return Err(Error::shape(
                    format!("nadam_step({path})"),
                    format!("{:?}", m.shape()),
                    format!("{:?}", tensor.shape()),
                ));
            }
        }
    }

    let t = state.step + 1;
    let bias1 = 1.0 - state.beta1.powi(t as i32);
    let bias2 = 1.0 - state.beta2.powi(t as i32);
    let b1 = F::from_f64(state.beta1);
    let b2 = F::from_f64(state.beta2);
    let c1 = F::from_f64(1.0 - state.beta1);
    let c2 = F::from_f64(1.0 - state.beta2);
    let inv_bias1 = F::from_f64(1.0 / bias1);
    let inv_bias2 = F::from_f64(1.0 / bias2);
    let lr = F::from_f64(state.learning_rate);
    let eps = F::from_f64(state.epsilon);

    for (path, tensor) in params.iter_mut() {
        let shape = tensor.shape().to_vec();
        let m = state
            .m
            .entry(path.clone())
            .or_insert_with(|| Tensor::zeros(shape.clone()))
            .data_mut();
        let v = state
            .v
            .entry(path.clone())
            .or_insert_with(|| Tensor::zeros(shape))
            .data_mut();
        let (theta, grad) = tensor.value_and_grad_mut();
        let grad = grad.expect("checked above");
        for i in 0..theta.len() {
            let g = grad[i];
            let mi = b1 * m[i] + c1 * g;
            let vi = b2 * v[i] + c2 * g * g;
            m[i] = mi;
            v[i] = vi;
            let mbar = b1 * (mi * inv_bias1) + c1 * g * inv_bias1;
            let vhat = vi * inv_bias2;
            theta[i] -= lr * mbar / (vhat.sqrt() + eps);
        }
    }
    state.step = t;
    Ok(())
}

/// Loss and accuracy aggregated over one pass of a split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: SplitKind,
    pub loss: f64,
    pub accuracy: f64,
    pub episodes: usize,
}

/// Optimizer steps taken by one epoch: full batches plus a partial tail.
pub fn batch_count(episodes_per_epoch: usize, batch_size: usize) -> usize {
    episodes_per_epoch.div_ceil(batch_size)
}

/// Index of the best accuracy, earliest on ties; `None` for an empty slice.
pub fn best_epoch(val_accuracies: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &acc) in val_accuracies.iter().enumerate() {
        if best.map_or(true, |b| acc > val_accuracies[b]) {
            best = Some(i);
        }
    }
    best
}

fn count_correct(probs: &Tensor<f32>, targets: &[usize]) -> usize {
    let k = probs.shape()[1];
    probs
        .data()
        .chunks_exact(k)
        .zip(targets)
        .filter(|(row, &t)| {
            let (mut arg, mut best) = (0usize, f32::NEG_INFINITY);
            for (i, &p) in row.iter().enumerate() {
                if p > best {
                    best = p;
                    arg = i;
                }
            }
            arg == t
        })
        .count()
}

/// Trains for `episodes_per_epoch` episodes in minibatches: the batch loss
/// is the mean of its episode losses and each batch takes one optimizer
/// step. The final batch may be partial.
pub fn train_epoch(
    model: &mut Model<f32>,
    sampler: &mut EpisodeSampler,
    episodes_per_epoch: usize,
    batch_size: usize,
    optimizer: &mut NadamState<f32>,
    epoch: usize,
) -> Result<MetricsRecord> {
    if episodes_per_epoch == 0 || batch_size == 0 {
        return Err(Error::invalid("train_epoch", "episode and batch counts must be positive"));
    }
    let mut remaining = episodes_per_epoch;
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    while remaining > 0 {
        let take = remaining.min(batch_size);
        let episodes = sampler.sample_batch(take)?;
        let graph = Graph::new();
        let out = model.forward_batch(&graph, &episodes, NormMode::Train)?;
        loss_sum += out
            .episode_losses
            .value()
            .data()
            .iter()
            .map(|&l| l as f64)
            .sum::<f64>();
        let targets: Vec<usize> = episodes.iter().map(|e| e.target).collect();
        correct += count_correct(&out.probs, &targets);
        let mut grads = graph.backward(out.loss)?;
        out.bound.write_grads(&mut grads, &mut model.params)?;
        nadam_step(&mut model.params, optimizer)?;
        remaining -= take;
    }
    Ok(MetricsRecord {
        epoch,
        split: SplitKind::Train,
        loss: loss_sum / episodes_per_epoch as f64,
        accuracy: correct as f64 / episodes_per_epoch as f64,
        episodes: episodes_per_epoch,
    })
}

/// Eval-mode episodes per evaluation batch; eval-mode normalization is
/// per-row, so batching changes throughput only, never values.
const EVAL_CHUNK: usize = 16;

/// Accuracy and loss over `num_episodes` fresh episodes in eval mode.
/// Running statistics are not touched; the sampler should not augment.
pub fn evaluate(
    model: &mut Model<f32>,
    sampler: &mut EpisodeSampler,
    num_episodes: usize,
    split: SplitKind,
    epoch: usize,
) -> Result<MetricsRecord> {
    if num_episodes == 0 {
        return Err(Error::invalid("evaluate", "need at least one episode"));
    }
    let mut remaining = num_episodes;
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    while remaining > 0 {
        let take = remaining.min(EVAL_CHUNK);
        let episodes = sampler.sample_batch(take)?;
        let graph = Graph::new();
        let out = model.forward_batch(&graph, &episodes, NormMode::Eval)?;
        loss_sum += out
            .episode_losses
            .value()
            .data()
            .iter()
            .map(|&l| l as f64)
            .sum::<f64>();
        let targets: Vec<usize> = episodes.iter().map(|e| e.target).collect();
        correct += count_correct(&out.probs, &targets);
        remaining -= take;
    }
    Ok(MetricsRecord {
        epoch,
        split,
        loss: loss_sum / num_episodes as f64,
        accuracy: correct as f64 / num_episodes as f64,
        episodes: num_episodes,
    })
}

/// Epoch schedule; the published protocol is 50 epochs of 60000 episodes
/// at batch size 32.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub batch_size: usize,
    pub val_episodes: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { epochs: 50, episodes_per_epoch: 60_000, batch_size: 32, val_episodes: 600 }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.episodes_per_epoch == 0 || self.batch_size == 0 || self.val_episodes == 0 {
            return Err(Error::Config("schedule fields must all be positive".into()));
        }
        Ok(())
    }
}

/// Every seed a run consumes, derived from the single configured seed so a
/// checkpoint records the full provenance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub global: u64,
    pub splits: u64,
    pub model: u64,
    pub train_stream: u64,
    pub val_stream: u64,
    pub test_stream: u64,
}

impl SeedRecord {
    pub fn derive(global: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(global);
        SeedRecord {
            global,
            splits: rng.gen(),
            model: rng.gen(),
            train_stream: rng.gen(),
            val_stream: rng.gen(),
            test_stream: rng.gen(),
        }
    }
}

/// Result of `fit`: the highest-validation-accuracy checkpoint and the full
/// per-epoch metrics history (train and val records interleaved).
pub struct FitOutcome {
    pub best: Checkpoint,
    pub history: Vec<MetricsRecord>,
}

/// Runs `schedule.epochs` rounds of train-then-validate and retains the
/// checkpoint with the highest validation accuracy (earliest on ties).
/// Validation is injected so callers control the split and the budget.
pub fn fit(
    model: &mut Model<f32>,
    optimizer: &mut NadamState<f32>,
    train_sampler: &mut EpisodeSampler,
    schedule: &Schedule,
    policy: &crate::episodes::AugmentPolicy,
    seeds: &SeedRecord,
    validate: &mut dyn FnMut(&mut Model<f32>, usize) -> Result<MetricsRecord>,
) -> Result<FitOutcome> {
    schedule.validate()?;
    let mut history = Vec::with_capacity(2 * schedule.epochs);
    let mut best: Option<Checkpoint> = None;
    for epoch in 1..=schedule.epochs {
        let train_rec = train_epoch(
            model,
            train_sampler,
            schedule.episodes_per_epoch,
            schedule.batch_size,
            optimizer,
            epoch,
        )?;
        history.push(train_rec);
        let val_rec = validate(model, epoch)?;
        let improved = best.as_ref().map_or(true, |b| val_rec.accuracy > b.val_accuracy);
        if improved {
            best = Some(Checkpoint::capture(model, optimizer, policy, seeds, epoch, val_rec.accuracy));
        }
        history.push(val_rec);
    }
    Ok(FitOutcome { best: best.expect("epochs >= 1"), history })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Vec<usize>, Vec<f64>)]) -> ParamStore<f64> {
        let mut params = ParamStore::new();
        for (path, shape, data) in values {
            params
                .insert(path.to_string(), Tensor::new(shape.clone(), data.clone()).unwrap())
                .unwrap();
        }
        params
    }

    #[test]
    fn single_step_matches_the_pinned_oracle() {
        // theta = 1, g = theta (loss theta^2 / 2), lr 0.001, fresh state:
        // m = 0.1, v = 0.001, mhat = 1, vhat = 1, mbar = 1.9,
        // theta' = 1 - 0.0019 / (1 + 1e-8).
        let mut params = store_with(&[("theta", vec![1], vec![1.0])]);
        params.get_mut("theta").unwrap().set_grad(vec![1.0]).unwrap();
        let mut state = NadamState::<f64>::new(0.001);
        nadam_step(&mut params, &mut state).unwrap();
        let got = params.get("theta").unwrap().data()[0];
        assert!((got - 0.998_100_000_019_000_011).abs() < 1e-12, "got {got:.18}");
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_untouched() {
        let mut params = store_with(&[("w", vec![3], vec![0.5, -1.5, 2.0])]);
        params.get_mut("w").unwrap().set_grad(vec![0.0; 3]).unwrap();
        let mut state = NadamState::<f64>::new(0.01);
        nadam_step(&mut params, &mut state).unwrap();
        assert_eq!(params.get("w").unwrap().data(), &[0.5, -1.5, 2.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_learning_rate_updates_moments_only() {
        let mut params = store_with(&[("w", vec![2], vec![1.0, 2.0])]);
        params.get_mut("w").unwrap().set_grad(vec![3.0, -4.0]).unwrap();
        let mut state = NadamState::<f64>::new(0.0);
        nadam_step(&mut params, &mut state).unwrap();
        assert_eq!(params.get("w").unwrap().data(), &[1.0, 2.0]);
        let (_, m, v) = state.moments().next().unwrap();
        assert!((m.data()[0] - 0.3).abs() < 1e-15);
        assert!((v.data()[1] - 0.016).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_an_error_before_any_update() {
        let mut params = store_with(&[
            ("a", vec![1], vec![1.0]),
            ("b", vec![1], vec![2.0]),
        ]);
        params.get_mut("b").unwrap().set_grad(vec![1.0]).unwrap();
        let mut state = NadamState::<f64>::new(0.1);
        let err = nadam_step(&mut params, &mut state).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(p) if p == "a"));
        assert_eq!(params.get("b").unwrap().data(), &[2.0], "no partial update");
        assert_eq!(state.step, 0);
    }

    #[test]
    fn moment_shape_mismatch_is_rejected() {
        let mut params = store_with(&[("w", vec![2], vec![1.0, 2.0])]);
        params.get_mut("w").unwrap().set_grad(vec![1.0, 1.0]).unwrap();
        let mut state = NadamState::<f64>::new(0.1);
        nadam_step(&mut params, &mut state).unwrap();

        let mut other = store_with(&[("w", vec![3], vec![0.0; 3])]);
        other.get_mut("w").unwrap().set_grad(vec![1.0; 3]).unwrap();
        assert!(nadam_step(&mut other, &mut state).is_err());
    }

    #[test]
    fn two_hundred_steps_crush_a_quadratic() {
        // loss = 0.5 sum a_i theta_i^2, gradient a_i theta_i.
        let coeffs: Vec<f64> = (0..10).map(|i| 0.5 + 0.45 * i as f64).collect();
        let mut params = store_with(&[("theta", vec![10], vec![1.0; 10])]);
        let mut state = NadamState::<f64>::new(0.05);
        let loss = |p: &ParamStore<f64>| -> f64 {
            p.get("theta")
                .unwrap()
                .data()
                .iter()
                .zip(&coeffs)
                .map(|(&t, &a)| 0.5 * a * t * t)
                .sum()
        };
        let initial = loss(&params);
        for _ in 0..200 {
            let grad: Vec<f64> = params
                .get("theta")
                .unwrap()
                .data()
                .iter()
                .zip(&coeffs)
                .map(|(&t, &a)| a * t)
                .collect();
            params.get_mut("theta").unwrap().set_grad(grad).unwrap();
            nadam_step(&mut params, &mut state).unwrap();
        }
        let end = loss(&params);
        assert!(
            end * 100.0 <= initial,
            "loss only fell from {initial:.6} to {end:.6}"
        );
        assert_eq!(state.step, 200);
    }

    #[test]
    fn schedule_arithmetic_matches_the_published_protocol() {
        assert_eq!(batch_count(60_000, 32), 1875);
        assert_eq!(batch_count(2_000, 8), 250);
        assert_eq!(batch_count(10, 3), 4);
        assert_eq!(batch_count(32, 32), 1);
    }

    #[test]
    fn best_epoch_takes_the_earliest_argmax() {
        assert_eq!(best_epoch(&[0.5, 0.7, 0.6]), Some(1));
        assert_eq!(best_epoch(&[0.5, 0.7, 0.7]), Some(1));
        assert_eq!(best_epoch(&[0.9]), Some(0));
        assert_eq!(best_epoch(&[]), None);
    }

    #[test]
    fn seed_record_is_deterministic_and_spread() {
        let a = SeedRecord::derive(7);
        let b = SeedRecord::derive(7);
        assert_eq!(a, b);
        let c = SeedRecord::derive(8);
        assert_ne!(a, c);
        let all = [a.splits, a.model, a.train_stream, a.val_stream, a.test_stream];
        let mut dedup = all.to_vec();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), all.len());
    }
}
