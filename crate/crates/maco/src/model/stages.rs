//! Graph-level stage pipeline shared by training and the tensor-level stage
//! methods.
//!
//! The whole minibatch runs through one graph: every image of every episode
//! is a row of a single leaf, so batch-norm statistics pool across the
//! minibatch exactly as they do at training time. Support pairs, query
//! broadcasts and per-class groupings are expressed as row gathers over the
//! shared feature matrix, which also makes the feature-stage parameter
//! sharing literal: one set of graph nodes serves all K*n+1 images.

use crate::error::Result;
use crate::tensor::{batch_norm_layer, BoundParams, Graph, NormMode, NormStore, ParamStore, Scalar, Tensor, Var};

use super::{pair_indices, Episode, ModelConfig};

/// One in-flight forward recording. Binds the parameter store to a graph on
/// construction; stage methods append ops.
pub struct ForwardPass<'g, 'm, F: Scalar> {
    graph: &'g Graph<F>,
    config: &'m ModelConfig,
    params: BoundParams<'g, F>,
    norms: &'m mut NormStore<F>,
    mode: NormMode,
    track_input_grads: bool,
}

/// Everything a caller needs after a batched forward: the loss to backprop,
/// bound parameters to route gradients, and inspection data.
pub struct BatchForward<'g, F: Scalar> {
    /// Mean of the per-episode losses; the training objective.
    pub loss: Var<'g, F>,
    /// Per-episode cross-entropy losses, extent [episodes].
    pub episode_losses: Var<'g, F>,
    /// Class probabilities, extent [episodes, K].
    pub probs: Tensor<F>,
    /// Raw logits variable, extent [episodes, K].
    pub logits: Var<'g, F>,
    /// The shared image leaf, extent [episodes * (K*n+1), h, w, c]. Only
    /// receives a gradient under [`ForwardPass::with_input_grads`].
    pub images: Var<'g, F>,
    /// Parameter bindings for gradient extraction.
    pub bound: BoundParams<'g, F>,
    pub trace: ForwardTrace<F>,
}

/// Structural facts recorded during a batched forward.
#[derive(Clone, Debug)]
pub struct ForwardTrace<F: Scalar> {
    /// Relational comparisons per class: binom(n, 2), or 1 for n = 1.
    pub pairs_per_class: usize,
    /// Total rows fed through g across the whole batch.
    pub pair_rows: usize,
    /// Conditioned class vectors, extent [episodes * K, embed_dim].
    pub conditioned: Tensor<F>,
    /// How many gathered references each feature row received; indexes
    /// follow the image packing order.
    pub feature_row_usage: Vec<usize>,
}

impl<'g, 'm, F: Scalar> ForwardPass<'g, 'm, F> {
    pub fn new(
        graph: &'g Graph<F>,
        config: &'m ModelConfig,
        params: &ParamStore<F>,
        norms: &'m mut NormStore<F>,
        mode: NormMode,
    ) -> Self {
        ForwardPass {
            graph,
            config,
            params: BoundParams::bind(graph, params),
            norms,
            mode,
            track_input_grads: false,
        }
    }

    /// Track gradients w.r.t. the image pixels too. Off by default: input
    /// gradients cost an extra conv backward per block and training never
    /// reads them. Saliency maps and gradient-path audits turn this on.
    pub fn with_input_grads(mut self) -> Self {
        self.track_input_grads = true;
        self
    }

    fn bn(&mut self, x: Var<'g, F>, path: &str) -> Result<Var<'g, F>> {
        let gamma = self.params.var(&format!("{path}/gamma"))?;
        let beta = self.params.var(&format!("{path}/beta"))?;
        batch_norm_layer(
            x,
            gamma,
            beta,
            self.norms.get_mut(path)?,
            F::from_f64(self.config.bn_momentum),
            F::from_f64(self.config.bn_epsilon),
            self.mode,
        )
    }

    /// dense -> batchnorm -> elu.
    fn fc_block(&mut self, x: Var<'g, F>, dense_path: &str, bn_path: &str) -> Result<Var<'g, F>> {
        let w = self.params.var(&format!("{dense_path}/weight"))?;
        let b = self.params.var(&format!("{dense_path}/bias"))?;
        let y = self.bn(x.dense(w, b)?, bn_path)?;
        Ok(y.elu())
    }

    /// A chain of FC blocks whose output is the elementwise sum of the
    /// first and final block outputs.
    fn fc_chain(&mut self, x: Var<'g, F>, stage: &str, depth: usize) -> Result<Var<'g, F>> {
        let mut cur = x;
        let mut first = None;
        for b in 0..depth {
            cur = self.fc_block(cur, &format!("{stage}/block{b}/dense"), &format!("{stage}/block{b}/bn"))?;
            if b == 0 {
                first = Some(cur);
            }
        }
        first.expect("depth >= 1").add(cur)
    }

    /// Feature stage over a whole image batch: conv blocks, flatten, linear.
    /// [m, h, w, c] -> [m, feature_dim].
    pub fn features(&mut self, images: Var<'g, F>) -> Result<Var<'g, F>> {
        let m = images.shape()[0];
        let mut x = images;
        for b in 0..self.config.conv_blocks {
            let k = self.params.var(&format!("feature/block{b}/conv/kernel"))?;
            let bias = self.params.var(&format!("feature/block{b}/conv/bias"))?;
            x = self.bn(x.conv2d_same(k, bias)?, &format!("feature/block{b}/bn"))?;
            x = x.elu().maxpool2()?;
        }
        let x = x.reshape(&[m, self.config.flatten_dim()?])?;
        let w = self.params.var("feature/dense/weight")?;
        let b = self.params.var("feature/dense/bias")?;
        x.dense(w, b)
    }

    /// Relational comparison g on pre-concatenated feature pairs:
    /// [rows, 2 * feature_dim] -> [rows, embed_dim].
    pub fn relational(&mut self, pairs: Var<'g, F>) -> Result<Var<'g, F>> {
        self.fc_chain(pairs, "relational", self.config.relational_depth)
    }

    /// Conditioning stage h. `query_rows` is ignored when conditioning is
    /// disabled; otherwise it is concatenated onto each class vector.
    /// [rows, embed_dim] -> [rows, embed_dim].
    pub fn conditioning(&mut self, class_vecs: Var<'g, F>, query_rows: Var<'g, F>) -> Result<Var<'g, F>> {
        let input = if self.config.conditioning_enabled {
            class_vecs.concat(query_rows, 1)?
        } else {
            class_vecs
        };
        self.fc_chain(input, "conditioning", self.config.conditioning_depth)
    }

    /// Conditioning on class vectors alone; only valid with conditioning
    /// disabled, where no query input exists.
    fn conditioning_unconditioned(&mut self, class_vecs: Var<'g, F>) -> Result<Var<'g, F>> {
        debug_assert!(!self.config.conditioning_enabled);
        self.fc_chain(class_vecs, "conditioning", self.config.conditioning_depth)
    }

    /// Classification stage: [episodes, K, embed] plus [episodes,
    /// feature_dim] -> logits [episodes, K].
    pub fn classify(&mut self, stack: Var<'g, F>, query: Var<'g, F>) -> Result<Var<'g, F>> {
        let mut x = stack;
        for c in 0..2 {
            let k = self.params.var(&format!("classifier/conv{c}/kernel"))?;
            let b = self.params.var(&format!("classifier/conv{c}/bias"))?;
            x = self.bn(x.conv1d_valid(k, b)?, &format!("classifier/conv{c}/bn"))?;
            x = x.elu();
        }
        let pooled = x.mean_axis1()?;
        let joint = pooled.concat(query, 1)?;
        let h = self.fc_block(joint, "classifier/dense", "classifier/dense/bn")?;
        let w = self.params.var("classifier/out/weight")?;
        let b = self.params.var("classifier/out/bias")?;
        h.dense(w, b)
    }

    /// Full pipeline over a minibatch of episodes.
    pub fn episode_batch(mut self, episodes: &[Episode<F>]) -> Result<BatchForward<'g, F>> {
        let cfg = self.config;
        let (ways, shots) = (cfg.ways, cfg.shots);
        let per_ep = cfg.images_per_episode();
        let b = episodes.len();
        let m = b * per_ep;

        // One leaf for every image in the batch. Per episode: class 0 shots,
        // class 1 shots, ..., then the query last.
        let (h, w, c) = (cfg.image_size, cfg.image_size, cfg.channels);
        let mut data = Vec::with_capacity(m * h * w * c);
        for ep in episodes {
            for class in &ep.support {
                for img in class {
                    data.extend_from_slice(img.data());
                }
            }
            data.extend_from_slice(ep.query.data());
        }
        let tensor = Tensor::new(vec![m, h, w, c], data)?;
        let images = if self.track_input_grads {
            self.graph.leaf(tensor)
        } else {
            self.graph.const_leaf(tensor)
        };

        let feats = self.features(images)?;

        // Unordered support pairs for every class of every episode, each
        // oriented by feature content so the evaluation set depends only on
        // the multiset of support images.
        let pairs_per_class = cfg.pairs_per_class();
        let mut left = Vec::with_capacity(b * ways * pairs_per_class);
        let mut right = Vec::with_capacity(b * ways * pairs_per_class);
        for bi in 0..b {
            for k in 0..ways {
                let (l, r) = pair_indices(shots, bi * per_ep + k * shots);
                left.extend_from_slice(&l);
                right.extend_from_slice(&r);
            }
        }
        super::orient_pairs(&feats.value(), &mut left, &mut right);
        let pairs = feats.gather_rows(&left)?.concat(feats.gather_rows(&right)?, 1)?;
        let g_out = self.relational(pairs)?;
        let class_vecs = g_out
            .reshape(&[b * ways, pairs_per_class, cfg.embed_dim])?
            .mean_axis1()?;

        // Broadcast each episode's query feature across its K classes; the
        // ablation never gathers those rows at all.
        let query_idx: Vec<usize> = (0..b).map(|bi| bi * per_ep + ways * shots).collect();
        let mut query_rep = Vec::new();
        let cond = if cfg.conditioning_enabled {
            query_rep = (0..b * ways).map(|r| query_idx[r / ways]).collect();
            let query_rows = feats.gather_rows(&query_rep)?;
            self.conditioning(class_vecs, query_rows)?
        } else {
            self.conditioning_unconditioned(class_vecs)?
        };
        let conditioned = cond.value();

        let stack = cond.reshape(&[b, ways, cfg.embed_dim])?;
        let queries = feats.gather_rows(&query_idx)?;
        let logits = self.classify(stack, queries)?;

        let targets: Vec<usize> = episodes.iter().map(|ep| ep.target).collect();
        let (episode_losses, probs) = logits.softmax_cross_entropy(&targets)?;
        let loss = episode_losses.mean_all();

        let mut feature_row_usage = vec![0usize; m];
        for &i in left.iter().chain(&right).chain(&query_rep).chain(&query_idx) {
            feature_row_usage[i] += 1;
        }

        Ok(BatchForward {
            loss,
            episode_losses,
            probs,
            logits,
            images,
            bound: self.params,
            trace: ForwardTrace {
                pairs_per_class,
                pair_rows: left.len(),
                conditioned,
                feature_row_usage,
            },
        })
    }
}
