//! Batch normalization: running statistics and train/eval dispatch.
//!
//! Training mode normalizes with batch statistics (population variance)
//! recorded on the graph; evaluation mode folds the running statistics and
//! the scale/shift parameters into a per-channel affine constant. Running
//! statistic updates are side effects outside the graph, so a forward pass
//! built for gradient checking can disable them.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::{Graph, Scalar, Tensor, Var};

/// Exponential moving averages of per-channel mean and variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<F: Scalar> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

impl<F: Scalar> RunningStats<F> {
    /// Fresh statistics: mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![F::zero(); channels], var: vec![F::one(); channels] }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// running = momentum * running + (1 - momentum) * batch.
    pub fn update(&mut self, batch_mean: &[F], batch_var: &[F], momentum: F) {
        let one_m = F::one() - momentum;
        for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
            *r = momentum * *r + one_m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(batch_var) {
            *r = momentum * *r + one_m * b;
        }
    }
}

/// Running statistics for every normalization layer, keyed by layer path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NormStore<F: Scalar> {
    stats: BTreeMap<String, RunningStats<F>>,
}

impl<F: Scalar> NormStore<F> {
    pub fn new() -> Self {
        NormStore { stats: BTreeMap::new() }
    }

    pub fn insert(&mut self, path: impl Into<String>, stats: RunningStats<F>) -> Result<()> {
        let path = path.into();
        if self.stats.contains_key(&path) {
            return Err(Error::invalid("NormStore::insert", format!("duplicate stats path {path:?}")));
        }
        self.stats.insert(path, stats);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&RunningStats<F>> {
        self.stats.get(path).ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut RunningStats<F>> {
        self.stats.get_mut(path).ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &RunningStats<F>)> {
        self.stats.iter()
    }

    pub fn cast<G: Scalar>(&self) -> NormStore<G> {
        NormStore {
            stats: self
                .stats
                .iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        RunningStats {
                            mean: v.mean.iter().map(|&x| G::from_f64(x.to_f64())).collect(),
                            var: v.var.iter().map(|&x| G::from_f64(x.to_f64())).collect(),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// How a normalization layer behaves in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics on the graph; running statistics updated.
    Train,
    /// Batch statistics on the graph; running statistics untouched. Keeps a
    /// gradient-check forward pass side-effect free.
    TrainFrozen,
    /// Running statistics folded into a constant affine.
    Eval,
}

/// One normalization layer applied to a graph variable.
pub fn batch_norm_layer<'g, F: Scalar>(
    x: Var<'g, F>,
    gamma: Var<'g, F>,
    beta: Var<'g, F>,
    stats: &mut RunningStats<F>,
    momentum: F,
    epsilon: F,
    mode: NormMode,
) -> Result<Var<'g, F>> {
    match mode {
        NormMode::Train | NormMode::TrainFrozen => {
            let (y, mean, var) = x.batch_norm(gamma, beta, epsilon)?;
            if mode == NormMode::Train {
                if mean.len() != stats.channels() {
                    return Err(Error::shape(
                        "batch_norm_layer",
                        format!("{} channels", stats.channels()),
                        format!("{} channels", mean.len()),
                    ));
                }
                stats.update(&mean, &var, momentum);
            }
            Ok(y)
        }
        NormMode::Eval => {
            let gv = gamma.value();
            let bv = beta.value();
            if stats.channels() != gv.numel() {
                return Err(Error::shape(
                    "batch_norm_layer",
                    format!("{} channels", gv.numel()),
                    format!("{} channels", stats.channels()),
                ));
            }
            let mut scale = Vec::with_capacity(stats.channels());
            let mut shift = Vec::with_capacity(stats.channels());
            for c in 0..stats.channels() {
                let s = gv.data()[c] / (stats.var[c] + epsilon).sqrt();
                scale.push(s);
                shift.push(bv.data()[c] - stats.mean[c] * s);
            }
            x.affine_channels(scale, shift)
        }
    }
}

/// Self-contained state for the standalone tensor-level op: scale, shift,
/// running statistics and the layer's hyperparameters.
#[derive(Clone, Debug)]
pub struct BatchNormState<F: Scalar> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub running: RunningStats<F>,
    pub momentum: F,
    pub epsilon: F,
}

impl<F: Scalar> BatchNormState<F> {
    pub fn new(channels: usize, momentum: F, epsilon: F) -> Self {
        BatchNormState {
            gamma: Tensor::full(vec![channels], F::one()),
            beta: Tensor::zeros(vec![channels]),
            running: RunningStats::new(channels),
            momentum,
            epsilon,
        }
    }
}

/// Tensor-level batch normalization over the last axis. Training mode uses
/// batch statistics and updates the running averages; evaluation mode uses
/// the stored running statistics.
pub fn batchnorm<F: Scalar>(x: &Tensor<F>, state: &mut BatchNormState<F>, training: bool) -> Result<Tensor<F>> {
    let graph = Graph::new();
    let xv = graph.leaf(x.clone());
    let gamma = graph.leaf(state.gamma.clone());
    let beta = graph.leaf(state.beta.clone());
    let mode = if training { NormMode::Train } else { NormMode::Eval };
    let y = batch_norm_layer(xv, gamma, beta, &mut state.running, state.momentum, state.epsilon, mode)?;
    Ok(y.value())
}
