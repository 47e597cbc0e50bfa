//! The four network stages and their composition into a K-way episodic
//! classifier.
//!
//! A [`Model`] owns the trainable parameters and the batch-norm running
//! statistics. Stage methods ([`Model::feature_stage`],
//! [`Model::relational_g`], ...) evaluate one stage on plain tensors;
//! [`Model::forward`] and [`Model::forward_batch`] run the whole pipeline
//! and, through [`stages::ForwardPass`], can be recorded on a caller's graph
//! for training.

mod stages;

pub use stages::{BatchForward, ForwardPass, ForwardTrace};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    glorot_normal, lecun_normal, Graph, NormMode, NormStore, ParamStore, RunningStats, Scalar,
    Tensor,
};

/// Architecture and episode-shape hyperparameters.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Input images are image_size x image_size x channels.
    pub image_size: usize,
    pub channels: usize,
    /// Conv blocks in the feature stage; each halves the spatial extent.
    pub conv_blocks: usize,
    /// Filters per feature-stage conv.
    pub conv_channels: usize,
    /// Output width of the feature stage's final linear layer.
    pub feature_dim: usize,
    /// Width of every FC block and of the 1D convs.
    pub embed_dim: usize,
    /// FC blocks in the relational stage (>= 2 for the skip connection).
    pub relational_depth: usize,
    /// FC blocks in the conditioning stage (>= 2).
    pub conditioning_depth: usize,
    /// Classes per episode, K.
    pub ways: usize,
    /// Support images per class, n.
    pub shots: usize,
    /// False switches the conditioning stage onto class vectors alone.
    pub conditioning_enabled: bool,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 84,
            channels: 3,
            conv_blocks: 4,
            conv_channels: 32,
            feature_dim: 800,
            embed_dim: 128,
            relational_depth: 4,
            conditioning_depth: 4,
            ways: 5,
            shots: 5,
            conditioning_enabled: true,
            bn_momentum: 0.99,
            bn_epsilon: 1e-3,
        }
    }
}

impl ModelConfig {
    /// Spatial extent after each halving pool, and the flattened width fed
    /// to the feature stage's linear layer.
    pub fn flatten_dim(&self) -> Result<usize> {
        let mut s = self.image_size;
        for block in 0..self.conv_blocks {
            if s < 2 {
                return Err(Error::Config(format!(
                    "image_size {} is exhausted by pooling at conv block {block}",
                    self.image_size
                )));
            }
            s /= 2;
        }
        Ok(s * s * self.conv_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.conv_blocks == 0 || self.conv_channels == 0 {
            return Err(Error::Config("channels, conv_blocks and conv_channels must be positive".into()));
        }
        if self.feature_dim == 0 || self.embed_dim == 0 {
            return Err(Error::Config("feature_dim and embed_dim must be positive".into()));
        }
        if self.relational_depth < 2 || self.conditioning_depth < 2 {
            return Err(Error::Config(
                "relational_depth and conditioning_depth must be >= 2; the skip connection needs distinct first and final blocks".into(),
            ));
        }
        if self.ways < 5 {
            return Err(Error::Config(format!(
                "ways {} < 5: two width-3 valid convolutions need a class sequence of length >= 5",
                self.ways
            )));
        }
        if self.shots == 0 {
            return Err(Error::Config("shots must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!("bn_momentum {} outside [0, 1)", self.bn_momentum)));
        }
        if self.bn_epsilon <= 0.0 {
            return Err(Error::Config(format!("bn_epsilon {} must be positive", self.bn_epsilon)));
        }
        self.flatten_dim()?;
        Ok(())
    }

    /// Unordered support pairs evaluated per class: binom(n, 2), except the
    /// single self-pair at n = 1.
    pub fn pairs_per_class(&self) -> usize {
        if self.shots < 2 {
            1
        } else {
            self.shots * (self.shots - 1) / 2
        }
    }

    /// Images per episode: K * n support plus one query.
    pub fn images_per_episode(&self) -> usize {
        self.ways * self.shots + 1
    }

    /// Width of the conditioning stage input.
    pub fn conditioning_in(&self) -> usize {
        if self.conditioning_enabled {
            self.embed_dim + self.feature_dim
        } else {
            self.embed_dim
        }
    }
}

/// One K-way n-shot classification trial: K support lists of n images each,
/// one query image, and the query's class position.
#[derive(Clone, Debug)]
pub struct Episode<F: Scalar> {
    pub support: Vec<Vec<Tensor<F>>>,
    pub query: Tensor<F>,
    pub target: usize,
}

impl<F: Scalar> Episode<F> {
    /// Structural agreement with a config: K classes of n images, all with
    /// the configured extents, target in range.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let want = [config.image_size, config.image_size, config.channels];
        if self.support.len() != config.ways {
            return Err(Error::invalid(
                "Episode::validate",
                format!("{} support classes, config says {}", self.support.len(), config.ways),
            ));
        }
        for (k, class) in self.support.iter().enumerate() {
            if class.len() != config.shots {
                return Err(Error::invalid(
                    "Episode::validate",
                    format!("class {k} has {} images, config says {}", class.len(), config.shots),
                ));
            }
            for img in class {
                if img.shape() != want {
                    return Err(Error::shape("Episode::validate", format!("{want:?}"), format!("{:?}", img.shape())));
                }
            }
        }
        if self.query.shape() != want {
            return Err(Error::shape("Episode::validate", format!("{want:?}"), format!("{:?}", self.query.shape())));
        }
        if self.target >= config.ways {
            return Err(Error::invalid(
                "Episode::validate",
                format!("target {} out of range for {} ways", self.target, config.ways),
            ));
        }
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> Episode<G> {
        Episode {
            support: self.support.iter().map(|c| c.iter().map(Tensor::cast).collect()).collect(),
            query: self.query.cast(),
            target: self.target,
        }
    }
}

/// Parameters, running statistics and the config they were built for.
#[derive(Clone, Debug)]
pub struct Model<F: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    pub norms: NormStore<F>,
}

impl<F: Scalar> Model<F> {
    /// Initialize all parameters from a seed: conv kernels glorot normal,
    /// dense weights lecun normal, biases zero, batch-norm scale 1 shift 0.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut norms = NormStore::new();

        let add_bn = |params: &mut ParamStore<F>, norms: &mut NormStore<F>, path: &str, c: usize| -> Result<()> {
            params.insert(format!("{path}/gamma"), Tensor::full(vec![c], F::one()))?;
            params.insert(format!("{path}/beta"), Tensor::zeros(vec![c]))?;
            norms.insert(path, RunningStats::new(c))
        };

        let cc = config.conv_channels;
        let mut cin = config.channels;
        for b in 0..config.conv_blocks {
            let prefix = format!("feature/block{b}");
            params.insert(
                format!("{prefix}/conv/kernel"),
                glorot_normal(vec![3, 3, cin, cc], 9 * cin, 9 * cc, &mut rng),
            )?;
            params.insert(format!("{prefix}/conv/bias"), Tensor::zeros(vec![cc]))?;
            add_bn(&mut params, &mut norms, &format!("{prefix}/bn"), cc)?;
            cin = cc;
        }
        let flatten = config.flatten_dim()?;
        params.insert(
            "feature/dense/weight",
            lecun_normal(vec![config.feature_dim, flatten], flatten, &mut rng),
        )?;
        params.insert("feature/dense/bias", Tensor::zeros(vec![config.feature_dim]))?;

        let e = config.embed_dim;
        let add_fc_chain =
            |params: &mut ParamStore<F>, norms: &mut NormStore<F>, rng: &mut ChaCha8Rng, stage: &str, depth: usize, in_dim: usize| -> Result<()> {
                let mut d = in_dim;
                for b in 0..depth {
                    let prefix = format!("{stage}/block{b}");
                    params.insert(format!("{prefix}/dense/weight"), lecun_normal(vec![e, d], d, rng))?;
                    params.insert(format!("{prefix}/dense/bias"), Tensor::zeros(vec![e]))?;
                    add_bn(params, norms, &format!("{prefix}/bn"), e)?;
                    d = e;
                }
                Ok(())
            };
        add_fc_chain(&mut params, &mut norms, &mut rng, "relational", config.relational_depth, 2 * config.feature_dim)?;
        add_fc_chain(&mut params, &mut norms, &mut rng, "conditioning", config.conditioning_depth, config.conditioning_in())?;

        for c in 0..2 {
            let prefix = format!("classifier/conv{c}");
            params.insert(format!("{prefix}/kernel"), glorot_normal(vec![3, e, e], 3 * e, 3 * e, &mut rng))?;
            params.insert(format!("{prefix}/bias"), Tensor::zeros(vec![e]))?;
            add_bn(&mut params, &mut norms, &format!("{prefix}/bn"), e)?;
        }
        let joint = e + config.feature_dim;
        params.insert("classifier/dense/weight", lecun_normal(vec![e, joint], joint, &mut rng))?;
        params.insert("classifier/dense/bias", Tensor::zeros(vec![e]))?;
        add_bn(&mut params, &mut norms, "classifier/dense/bn", e)?;
        params.insert("classifier/out/weight", lecun_normal(vec![config.ways, e], e, &mut rng))?;
        params.insert("classifier/out/bias", Tensor::zeros(vec![config.ways]))?;

        Ok(Model { config, params, norms })
    }

    /// Precision-lifted copy of the whole model.
    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model { config: self.config.clone(), params: self.params.cast(), norms: self.norms.cast() }
    }

    /// Reassembles a model from stored state, checking that the parameter
    /// set matches what `config` would create.
    pub fn from_parts(config: ModelConfig, params: ParamStore<F>, norms: NormStore<F>) -> Result<Self> {
        config.validate()?;
        let reference: Model<F> = Model::new(config.clone(), 0)?;
        for (path, tensor) in reference.params.iter() {
            let got = params.get(path)?;
            if got.shape() != tensor.shape() {
                return Err(Error::shape(
                    format!("Model::from_parts({path})"),
                    format!("{:?}", tensor.shape()),
                    format!("{:?}", got.shape()),
                ));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::invalid(
                "Model::from_parts",
                format!("{} parameters stored, config wants {}", params.len(), reference.params.len()),
            ));
        }
        for (path, stats) in reference.norms.iter() {
            if norms.get(path)?.channels() != stats.channels() {
                return Err(Error::invalid(
                    "Model::from_parts",
                    format!("running stats for {path} have the wrong channel count"),
                ));
            }
        }
        Ok(Model { config, params, norms })
    }

    /// Feature stage on one image: conv blocks, flatten, linear map.
    pub fn feature_stage(&mut self, image: &Tensor<F>, mode: NormMode) -> Result<Tensor<F>> {
        let graph = Graph::new();
        let mut pass = ForwardPass::new(&graph, &self.config, &self.params, &mut self.norms, mode);
        let images = graph.leaf(batch_of(std::slice::from_ref(image)));
        let feats = pass.features(images)?;
        Ok(row(&feats.value(), 0))
    }

    /// One relational comparison g(xi, xj).
    pub fn relational_g(&mut self, xi: &Tensor<F>, xj: &Tensor<F>, mode: NormMode) -> Result<Tensor<F>> {
        let graph = Graph::new();
        let mut pass = ForwardPass::new(&graph, &self.config, &self.params, &mut self.norms, mode);
        let a = graph.leaf(batch_of(std::slice::from_ref(xi)));
        let b = graph.leaf(batch_of(std::slice::from_ref(xj)));
        let out = pass.relational(a.concat(b, 1)?)?;
        Ok(row(&out.value(), 0))
    }

    /// Class representation: mean of g over unordered support pairs; a
    /// single self-pair when only one image is given.
    pub fn relational_stage(&mut self, class_features: &[Tensor<F>], mode: NormMode) -> Result<Tensor<F>> {
        if class_features.is_empty() {
            return Err(Error::invalid("relational_stage", "empty class feature list"));
        }
        let graph = Graph::new();
        let mut pass = ForwardPass::new(&graph, &self.config, &self.params, &mut self.norms, mode);
        let stacked = batch_of(class_features);
        let (mut left, mut right) = pair_indices(class_features.len(), 0);
        orient_pairs(&stacked, &mut left, &mut right);
        let feats = graph.leaf(stacked);
        let pairs = feats.gather_rows(&left)?.concat(feats.gather_rows(&right)?, 1)?;
        let g_out = pass.relational(pairs)?;
        let mean = g_out.reshape(&[1, left.len(), self.config.embed_dim])?.mean_axis1()?;
        Ok(row(&mean.value(), 0))
    }

    /// One conditioned class vector h(class_vec, query) (or h(class_vec)
    /// when conditioning is disabled).
    pub fn conditioning_stage(
        &mut self,
        class_vec: &Tensor<F>,
        query_feat: &Tensor<F>,
        mode: NormMode,
    ) -> Result<Tensor<F>> {
        let graph = Graph::new();
        let mut pass = ForwardPass::new(&graph, &self.config, &self.params, &mut self.norms, mode);
        let cv = graph.leaf(batch_of(std::slice::from_ref(class_vec)));
        let q = graph.leaf(batch_of(std::slice::from_ref(query_feat)));
        let out = pass.conditioning(cv, q)?;
        Ok(row(&out.value(), 0))
    }

    /// Logits from K conditioned vectors plus the query feature.
    pub fn classification_stage(
        &mut self,
        conditioned: &[Tensor<F>],
        query_feat: &Tensor<F>,
        mode: NormMode,
    ) -> Result<Tensor<F>> {
        if conditioned.len() != self.config.ways {
            return Err(Error::invalid(
                "classification_stage",
                format!("{} conditioned vectors for {} ways", conditioned.len(), self.config.ways),
            ));
        }
        let graph = Graph::new();
        let mut pass = ForwardPass::new(&graph, &self.config, &self.params, &mut self.norms, mode);
        let vars: Vec<_> = conditioned.iter().map(|t| graph.leaf(t.clone())).collect();
        let stack = graph.stack_rows(&vars)?.reshape(&[1, conditioned.len(), self.config.embed_dim])?;
        let q = graph.leaf(batch_of(std::slice::from_ref(query_feat)));
        let logits = pass.classify(stack, q)?;
        Ok(row(&logits.value(), 0))
    }

    /// Full pipeline on one episode: class probabilities and the scalar
    /// cross-entropy loss.
    pub fn forward(&mut self, episode: &Episode<F>, mode: NormMode) -> Result<(Tensor<F>, F)> {
        let graph = Graph::new();
        let out = self.forward_batch(&graph, std::slice::from_ref(episode), mode)?;
        let probs = row(&out.probs, 0);
        let loss = out.loss.item();
        Ok((probs, loss))
    }

    /// Record the full pipeline for a minibatch of episodes on `graph`.
    /// All images share one leaf so batch-norm statistics pool over the
    /// whole minibatch; the returned loss is the mean episode loss.
    pub fn forward_batch<'g>(
        &mut self,
        graph: &'g Graph<F>,
        episodes: &[Episode<F>],
        mode: NormMode,
    ) -> Result<BatchForward<'g, F>> {
        for ep in episodes {
            ep.validate(&self.config)?;
        }
        let pass = ForwardPass::new(graph, &self.config, &self.params, &mut self.norms, mode);
        pass.episode_batch(episodes)
    }

    /// [`Model::forward_batch`] with pixel gradients: backward additionally
    /// fills the `images` leaf gradient, for saliency maps and audits of
    /// which inputs reach the loss. Training uses the plain variant, where
    /// the image leaf is constant and its gradient work is skipped.
    pub fn forward_batch_with_input_grads<'g>(
        &mut self,
        graph: &'g Graph<F>,
        episodes: &[Episode<F>],
        mode: NormMode,
    ) -> Result<BatchForward<'g, F>> {
        for ep in episodes {
            ep.validate(&self.config)?;
        }
        let pass = ForwardPass::new(graph, &self.config, &self.params, &mut self.norms, mode).with_input_grads();
        pass.episode_batch(episodes)
    }
}

/// Stack same-shaped tensors along a new leading axis.
fn batch_of<F: Scalar>(items: &[Tensor<F>]) -> Tensor<F> {
    let mut shape = vec![items.len()];
    shape.extend_from_slice(items[0].shape());
    let mut data = Vec::with_capacity(items.len() * items[0].numel());
    for t in items {
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data).expect("uniform item shapes")
}

/// Extract row `i` of a rank >= 1 tensor, dropping the leading axis.
fn row<F: Scalar>(t: &Tensor<F>, i: usize) -> Tensor<F> {
    let rows = t.shape()[0];
    let width = t.numel() / rows;
    let shape = t.shape()[1..].to_vec();
    Tensor::new(shape, t.data()[i * width..][..width].to_vec()).expect("row extents")
}

/// Gather indices for the unordered support pairs of one class whose rows
/// start at `base`: (i, j) for i < j, or the self-pair (0, 0) for n = 1.
pub(crate) fn pair_indices(n: usize, base: usize) -> (Vec<usize>, Vec<usize>) {
    if n < 2 {
        return (vec![base], vec![base]);
    }
    let mut left = Vec::with_capacity(n * (n - 1) / 2);
    let mut right = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            left.push(base + i);
            right.push(base + j);
        }
    }
    (left, right)
}

/// Reorder each pair so the lexicographically smaller row of `rows` is g's
/// first argument. g itself is not symmetric, so without a content-based
/// orientation the set mean would depend on how the support list happens to
/// be ordered; with it, each unordered pair is evaluated exactly once in a
/// permutation-independent direction.
pub(crate) fn orient_pairs<F: Scalar>(rows: &Tensor<F>, left: &mut [usize], right: &mut [usize]) {
    let width = rows.numel() / rows.shape()[0];
    for (l, r) in left.iter_mut().zip(right.iter_mut()) {
        let a = &rows.data()[*l * width..][..width];
        let b = &rows.data()[*r * width..][..width];
        if lex_less(b, a) {
            std::mem::swap(l, r);
        }
    }
}

fn lex_less<F: Scalar>(a: &[F], b: &[F]) -> bool {
    for (&x, &y) in a.iter().zip(b) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(super) fn toy_config() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            channels: 3,
            conv_blocks: 2,
            conv_channels: 4,
            feature_dim: 12,
            embed_dim: 8,
            relational_depth: 2,
            conditioning_depth: 2,
            ways: 5,
            shots: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_config_matches_published_arithmetic() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        // 84 -> 42 -> 21 -> 10 -> 5, flattened 5*5*32 = 800.
        assert_eq!(c.flatten_dim().unwrap(), 800);
        assert_eq!(c.feature_dim, 800);
        assert_eq!(c.embed_dim, 128);
        assert_eq!(c.conditioning_in(), 928);
    }

    #[test]
    fn config_rejects_bad_shapes() {
        let mut c = ModelConfig::default();
        c.ways = 4;
        assert!(c.validate().is_err());
        c = ModelConfig::default();
        c.relational_depth = 1;
        assert!(c.validate().is_err());
        c = ModelConfig::default();
        c.image_size = 8;
        // Four pools exhaust 8 pixels.
        assert!(c.validate().is_err());
        c.conv_blocks = 2;
        assert!(c.validate().is_ok());
        c = ModelConfig::default();
        c.shots = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn pair_count_follows_binomial() {
        let mut c = toy_config();
        for (n, want) in [(1, 1), (2, 1), (3, 3), (4, 6), (5, 10), (6, 15)] {
            c.shots = n;
            assert_eq!(c.pairs_per_class(), want, "n={n}");
        }
    }

    #[test]
    fn pair_indices_enumerate_upper_triangle() {
        let (l, r) = pair_indices(4, 10);
        assert_eq!(l, vec![10, 10, 10, 11, 11, 12]);
        assert_eq!(r, vec![11, 12, 13, 12, 13, 13]);
        let (l1, r1) = pair_indices(1, 7);
        assert_eq!((l1, r1), (vec![7], vec![7]));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a: Model<f32> = Model::new(toy_config(), 3).unwrap();
        let b: Model<f32> = Model::new(toy_config(), 3).unwrap();
        let c: Model<f32> = Model::new(toy_config(), 4).unwrap();
        assert_eq!(a.params, b.params);
        let same_everywhere = a
            .params
            .iter()
            .zip(c.params.iter())
            .all(|((_, x), (_, y))| x.data() == y.data());
        assert!(!same_everywhere, "different seeds must differ somewhere");
    }

    #[test]
    fn init_shapes_and_zeros() {
        let m: Model<f32> = Model::new(toy_config(), 0).unwrap();
        assert_eq!(m.params.get("feature/block0/conv/kernel").unwrap().shape(), &[3, 3, 3, 4]);
        assert_eq!(m.params.get("feature/block1/conv/kernel").unwrap().shape(), &[3, 3, 4, 4]);
        // 8 -> 4 -> 2 spatial, flatten 2*2*4 = 16.
        assert_eq!(m.params.get("feature/dense/weight").unwrap().shape(), &[12, 16]);
        assert_eq!(m.params.get("relational/block0/dense/weight").unwrap().shape(), &[8, 24]);
        assert_eq!(m.params.get("conditioning/block0/dense/weight").unwrap().shape(), &[8, 20]);
        assert_eq!(m.params.get("classifier/conv0/kernel").unwrap().shape(), &[3, 8, 8]);
        assert_eq!(m.params.get("classifier/dense/weight").unwrap().shape(), &[8, 20]);
        assert_eq!(m.params.get("classifier/out/weight").unwrap().shape(), &[5, 8]);
        assert!(m.params.get("feature/block0/conv/bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(m.params.get("feature/block0/bn/gamma").unwrap().data().iter().all(|&v| v == 1.0));
        assert_eq!(m.norms.get("feature/block0/bn").unwrap().channels(), 4);
    }
}
