//! Few-shot episode construction: class splits, K-way n-shot sampling,
//! augmentation, and a procedural stand-in dataset.

mod augment;
mod synth;

pub use augment::{augment_image, warp_affine, WarpParams};
pub use synth::synth_dataset_generate;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Episode;
use crate::tensor::Tensor;

/// An immutable in-memory image dataset: square [s, s, c] tensors in
/// [0, 1], grouped by class.
#[derive(Clone, Debug)]
pub struct Dataset {
    image_size: usize,
    channels: usize,
    classes: Vec<DatasetClass>,
}

#[derive(Clone, Debug)]
pub struct DatasetClass {
    pub id: String,
    pub images: Vec<Tensor<f32>>,
}

impl Dataset {
    /// Validates class uniqueness and uniform square image extents.
    pub fn new(classes: Vec<DatasetClass>) -> Result<Self> {
        let first = classes
            .first()
            .and_then(|c| c.images.first())
            .ok_or_else(|| Error::Dataset("dataset has no images".into()))?;
        let shape = first.shape().to_vec();
        if shape.len() != 3 || shape[0] != shape[1] {
            return Err(Error::Dataset(format!("images must be square [s, s, c], got {shape:?}")));
        }
        let mut seen = std::collections::BTreeSet::new();
        for class in &classes {
            if !seen.insert(class.id.clone()) {
                return Err(Error::Dataset(format!("duplicate class id {:?}", class.id)));
            }
            if class.images.is_empty() {
                return Err(Error::Dataset(format!("class {:?} has no images", class.id)));
            }
            for img in &class.images {
                if img.shape() != &shape[..] {
                    return Err(Error::Dataset(format!(
                        "class {:?} mixes image extents {:?} and {:?}",
                        class.id,
                        shape,
                        img.shape()
                    )));
                }
            }
        }
        Ok(Dataset { image_size: shape[0], channels: shape[2], classes })
    }

    pub fn classes(&self) -> &[DatasetClass] {
        &self.classes
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Class ids in storage order.
    pub fn class_ids(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.id.clone()).collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.id == id)
    }
}

/// Which split a class belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitKind::Train),
            "val" => Ok(SplitKind::Val),
            "test" => Ok(SplitKind::Test),
            other => Err(Error::invalid("SplitKind::parse", format!("unknown split {other:?}"))),
        }
    }
}

/// A disjoint partition of the class set into train/val/test.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl ClassSplits {
    pub fn split(&self, kind: SplitKind) -> &[String] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }

    /// Every (class id, split) assignment, train then val then test.
    pub fn assignments(&self) -> impl Iterator<Item = (&str, SplitKind)> {
        (self.train.iter().map(|id| (id.as_str(), SplitKind::Train)))
            .chain(self.val.iter().map(|id| (id.as_str(), SplitKind::Val)))
            .chain(self.test.iter().map(|id| (id.as_str(), SplitKind::Test)))
    }
}

/// Partitions `class_ids` uniformly at random into splits of the given
/// sizes. Ids are sorted before shuffling, so the outcome depends only on
/// the id set and the seed, not on input order.
pub fn build_class_splits(
    class_ids: &[String],
    counts: (usize, usize, usize),
    seed: u64,
) -> Result<ClassSplits> {
    let (n_train, n_val, n_test) = counts;
    if n_train + n_val + n_test != class_ids.len() {
        return Err(Error::invalid(
            "build_class_splits",
            format!(
                "split counts {n_train}+{n_val}+{n_test} != {} classes",
                class_ids.len()
            ),
        ));
    }
    let mut ids: Vec<String> = class_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() != class_ids.len() {
        return Err(Error::invalid("build_class_splits", "duplicate class ids"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Ok(ClassSplits { train: ids, val, test, seed })
}

/// Random augmentation settings; angles in degrees, translation as a
/// fraction of the image extent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub enabled: bool,
    pub rotation_max_degrees: f64,
    pub translate_max_fraction: f64,
    pub zoom_range: [f64; 2],
    pub hflip_probability: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            enabled: true,
            rotation_max_degrees: 20.0,
            translate_max_fraction: 0.10,
            zoom_range: [0.9, 1.1],
            hflip_probability: 0.5,
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        AugmentPolicy { enabled: false, ..AugmentPolicy::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.zoom_range[0] > 0.0 && self.zoom_range[0] <= self.zoom_range[1]) {
            return Err(Error::invalid(
                "AugmentPolicy",
                format!("zoom range {:?} must be positive and ordered", self.zoom_range),
            ));
        }
        if !(0.0..=1.0).contains(&self.hflip_probability) {
            return Err(Error::invalid(
                "AugmentPolicy",
                format!("hflip probability {} outside [0, 1]", self.hflip_probability),
            ));
        }
        if self.rotation_max_degrees < 0.0 || self.translate_max_fraction < 0.0 {
            return Err(Error::invalid("AugmentPolicy", "negative augmentation magnitude"));
        }
        Ok(())
    }
}

/// The index skeleton of one episode, before images are materialized.
/// `classes` are dataset class indices in final slot order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeDraw {
    pub classes: Vec<usize>,
    pub support: Vec<Vec<usize>>,
    pub query: usize,
    pub target: usize,
}

/// Seeded K-way n-shot episode source over one split of a dataset.
///
/// Samplers are cheap to clone; `fork` gives a clone an independent
/// deterministic stream, so multiple workers can draw from the same
/// immutable dataset without coordinating.
#[derive(Clone)]
pub struct EpisodeSampler<'d> {
    dataset: &'d Dataset,
    classes: Vec<usize>,
    ways: usize,
    shots: usize,
    policy: AugmentPolicy,
    rng: ChaCha8Rng,
}

impl<'d> EpisodeSampler<'d> {
    /// `split_ids` lists the classes this sampler may draw from; each must
    /// exist in `dataset` and hold at least `shots + 1` images.
    pub fn new(
        dataset: &'d Dataset,
        split_ids: &[String],
        ways: usize,
        shots: usize,
        policy: AugmentPolicy,
        seed: u64,
    ) -> Result<Self> {
        policy.validate()?;
        if ways < 2 || shots < 1 {
            return Err(Error::invalid(
                "EpisodeSampler",
                format!("need ways >= 2 and shots >= 1, got {ways}-way {shots}-shot"),
            ));
        }
        if split_ids.len() < ways {
            return Err(Error::invalid(
                "EpisodeSampler",
                format!("{}-class split cannot host {ways}-way episodes", split_ids.len()),
            ));
        }
        let mut classes = Vec::with_capacity(split_ids.len());
        for id in split_ids {
            let idx = dataset
                .index_of(id)
                .ok_or_else(|| Error::Dataset(format!("split names unknown class {id:?}")))?;
            let available = dataset.classes[idx].images.len();
            if available < shots + 1 {
                return Err(Error::Dataset(format!(
                    "class {id:?} has {available} images; {shots}-shot episodes need {}",
                    shots + 1
                )));
            }
            classes.push(idx);
        }
        Ok(EpisodeSampler { dataset, classes, ways, shots, policy, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn ways(&self) -> usize {
        self.ways
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    /// A clone with an independent random stream.
    pub fn fork(&self, stream: u64) -> Self {
        let mut forked = self.clone();
        forked.rng.set_stream(stream);
        forked
    }

    /// Samples the episode skeleton: K distinct classes, n support indices
    /// per class without replacement, a uniform target class, a query index
    /// outside the target's support, and shuffled class positions.
    pub fn draw(&mut self) -> Result<EpisodeDraw> {
        let picked = rand::seq::index::sample(&mut self.rng, self.classes.len(), self.ways);
        let mut classes: Vec<usize> = picked.iter().map(|p| self.classes[p]).collect();
        let mut support: Vec<Vec<usize>> = classes
            .iter()
            .map(|&ci| {
                let count = self.dataset.classes[ci].images.len();
                rand::seq::index::sample(&mut self.rng, count, self.shots).into_vec()
            })
            .collect();

        let target_class = self.rng.gen_range(0..self.ways);
        let count = self.dataset.classes[classes[target_class]].images.len();
        let taken: std::collections::BTreeSet<usize> = support[target_class].iter().copied().collect();
        let free: Vec<usize> = (0..count).filter(|i| !taken.contains(i)).collect();
        let query = free[self.rng.gen_range(0..free.len())];

        let mut order: Vec<usize> = (0..self.ways).collect();
        order.shuffle(&mut self.rng);
        let target = order.iter().position(|&o| o == target_class).expect("permutation is total");
        let mut slot_classes = Vec::with_capacity(self.ways);
        let mut slot_support = Vec::with_capacity(self.ways);
        for &o in &order {
            slot_classes.push(classes[o]);
            slot_support.push(std::mem::take(&mut support[o]));
        }
        classes.clear();
        Ok(EpisodeDraw { classes: slot_classes, support: slot_support, query, target })
    }

    /// Draws a skeleton and materializes it into tensors, augmenting every
    /// image when the policy is enabled.
    pub fn sample(&mut self) -> Result<Episode<f32>> {
        let draw = self.draw()?;
        let mut support = Vec::with_capacity(self.ways);
        for (slot, indices) in draw.support.iter().enumerate() {
            let class = &self.dataset.classes[draw.classes[slot]];
            let mut images = Vec::with_capacity(self.shots);
            for &i in indices {
                images.push(augment_image(&class.images[i], &self.policy, &mut self.rng)?);
            }
            support.push(images);
        }
        let query_src = &self.dataset.classes[draw.classes[draw.target]].images[draw.query];
        let query = augment_image(query_src, &self.policy, &mut self.rng)?;
        Ok(Episode { support, query, target: draw.target })
    }

    pub fn sample_batch(&mut self, count: usize) -> Result<Vec<Episode<f32>>> {
        (0..count).map(|_| self.sample()).collect()
    }
}
