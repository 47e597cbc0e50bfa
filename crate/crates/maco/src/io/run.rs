//! Run configuration files and the four front-door operations behind the
//! CLI: train, eval, splits, synth.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::episodes::{
    build_class_splits, synth_dataset_generate, AugmentPolicy, ClassSplits, Dataset, EpisodeSampler,
    SplitKind,
};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::train::{evaluate, fit, Checkpoint, NadamState, Schedule, SeedRecord};

use super::{binomial_half_width, emit_metrics_csv, ingest_dataset, write_split_manifest};

/// Which model the run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Maco,
    NoCond,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Maco => "maco",
            Variant::NoCond => "no-cond",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "maco" => Ok(Variant::Maco),
            "no-cond" => Ok(Variant::NoCond),
            other => Err(Error::invalid("Variant::parse", format!("unknown variant {other:?}"))),
        }
    }
}

/// Where the images come from.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DatasetSource {
    /// Procedurally generated shape/stroke/hue classes.
    Synthetic { classes: usize, images_per_class: usize, image_size: usize, seed: u64 },
    /// Directory-per-class image tree on disk.
    Directory { path: PathBuf, image_size: usize },
}

impl DatasetSource {
    pub fn image_size(&self) -> usize {
        match self {
            DatasetSource::Synthetic { image_size, .. } => *image_size,
            DatasetSource::Directory { image_size, .. } => *image_size,
        }
    }

    /// Materializes the dataset. Deterministic for a given source value.
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Synthetic { classes, images_per_class, image_size, seed } => {
                synth_dataset_generate(*classes, *images_per_class, *image_size, *seed)
            }
            DatasetSource::Directory { path, image_size } => {
                Ok(ingest_dataset(path, *image_size)?.dataset)
            }
        }
    }
}

/// Class counts per split plus the shuffle seed.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

/// Episode geometry: K ways, n shots.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
}

/// Optional overrides on top of the stock model geometry.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub conv_blocks: Option<usize>,
    pub conv_channels: Option<usize>,
    /// Defaults to the conv flatten width when absent.
    pub feature_dim: Option<usize>,
    pub embed_dim: Option<usize>,
    pub relational_depth: Option<usize>,
    pub conditioning_depth: Option<usize>,
    pub bn_momentum: Option<f64>,
    pub bn_epsilon: Option<f64>,
}

impl ModelOverrides {
    /// Builds the full model config for one run.
    pub fn resolve(&self, image_size: usize, episode: EpisodeSpec, variant: Variant) -> Result<ModelConfig> {
        let stock = ModelConfig::default();
        let mut cfg = ModelConfig {
            image_size,
            channels: 3,
            conv_blocks: self.conv_blocks.unwrap_or(stock.conv_blocks),
            conv_channels: self.conv_channels.unwrap_or(stock.conv_channels),
            feature_dim: 0,
            embed_dim: self.embed_dim.unwrap_or(stock.embed_dim),
            relational_depth: self.relational_depth.unwrap_or(stock.relational_depth),
            conditioning_depth: self.conditioning_depth.unwrap_or(stock.conditioning_depth),
            ways: episode.ways,
            shots: episode.shots,
            conditioning_enabled: variant == Variant::Maco,
            bn_momentum: self.bn_momentum.unwrap_or(stock.bn_momentum),
            bn_epsilon: self.bn_epsilon.unwrap_or(stock.bn_epsilon),
        };
        cfg.feature_dim = match self.feature_dim {
            Some(d) => d,
            None => cfg.flatten_dim()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Nadam hyperparameters exposed to config files.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub learning_rate: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec { learning_rate: 1e-3 }
    }
}

/// Where artifacts land.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OutputSpec {
    pub dir: PathBuf,
}

/// One self-contained, reproducible run: dataset, splits, episode geometry,
/// model, augmentation, schedule, optimizer, output, seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub global_seed: u64,
    pub dataset: DatasetSource,
    pub splits: SplitSpec,
    pub episode: EpisodeSpec,
    #[serde(default)]
    pub model: ModelOverrides,
    #[serde(default)]
    pub augment: AugmentPolicy,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    pub output: OutputSpec,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid("RunConfig::from_toml", e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::invalid("RunConfig::to_toml", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.augment.validate()?;
        if self.optimizer.learning_rate <= 0.0 || !self.optimizer.learning_rate.is_finite() {
            return Err(Error::invalid("RunConfig", "learning_rate must be positive and finite"));
        }
        if self.episode.ways < 2 || self.episode.shots < 1 {
            return Err(Error::invalid("RunConfig", "episodes need ways >= 2 and shots >= 1"));
        }
        self.model.resolve(self.dataset.image_size(), self.episode, self.variant)?;
        Ok(())
    }
}

/// Paths written by a training run.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub config: PathBuf,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// Trains per `config` and writes three artifacts to the output directory:
/// `best.ckpt` (max-validation checkpoint with the resolved config embedded),
/// `metrics.csv`, and `config.toml`.
pub fn run_train(config: &RunConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let resolved_toml = config.to_toml()?;

    let dataset = config.dataset.load()?;
    let splits = build_class_splits(
        &dataset.class_ids(),
        (config.splits.train, config.splits.val, config.splits.test),
        config.splits.seed,
    )?;
    let seeds = SeedRecord::derive(config.global_seed);
    let model_cfg = config.model.resolve(dataset.image_size(), config.episode, config.variant)?;
    let mut model = Model::new(model_cfg, seeds.model)?;
    let mut optimizer = NadamState::new(config.optimizer.learning_rate);
    let mut train_sampler = EpisodeSampler::new(
        &dataset,
        &splits.train,
        config.episode.ways,
        config.episode.shots,
        config.augment.clone(),
        seeds.train_stream,
    )?;

    let (ways, shots, val_episodes) = (config.episode.ways, config.episode.shots, config.schedule.val_episodes);
    let val_ids = splits.val.clone();
    let val_stream = seeds.val_stream;
    let dataset_ref = &dataset;
    let outcome = fit(
        &mut model,
        &mut optimizer,
        &mut train_sampler,
        &config.schedule,
        &config.augment,
        &seeds,
        // Fixed stream: every epoch validates on the same episodes.
        &mut move |model, epoch| {
            let mut vs = EpisodeSampler::new(
                dataset_ref,
                &val_ids,
                ways,
                shots,
                AugmentPolicy::disabled(),
                val_stream,
            )?;
            evaluate(model, &mut vs, val_episodes, SplitKind::Val, epoch)
        },
    )?;

    let dir = &config.output.dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let checkpoint_path = dir.join("best.ckpt");
    let metrics_path = dir.join("metrics.csv");
    let config_path = dir.join("config.toml");

    let mut best = outcome.best;
    best.run_config = Some(resolved_toml.clone());
    best.save(&checkpoint_path)?;
    emit_metrics_csv(&outcome.history, &metrics_path)?;
    fs::write(&config_path, resolved_toml).map_err(|e| Error::io(config_path.display().to_string(), e))?;

    Ok(RunArtifacts {
        checkpoint: checkpoint_path,
        metrics: metrics_path,
        config: config_path,
        best_epoch: best.epoch,
        best_val_accuracy: best.val_accuracy,
    })
}

/// One evaluation summary in the style of the benchmark tables: the same
/// weights scored on 1-shot and 5-shot test episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyRow {
    pub variant: Variant,
    pub episodes: usize,
    pub one_shot_accuracy: f64,
    pub one_shot_half_width: f64,
    pub five_shot_accuracy: f64,
    pub five_shot_half_width: f64,
}

impl AccuracyRow {
    pub fn csv(&self) -> String {
        let mut text = String::from(
            "variant,episodes,one_shot_accuracy,one_shot_half_width,five_shot_accuracy,five_shot_half_width\n",
        );
        let _ = writeln!(
            text,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            self.variant.as_str(),
            self.episodes,
            self.one_shot_accuracy,
            self.one_shot_half_width,
            self.five_shot_accuracy,
            self.five_shot_half_width
        );
        text
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: 1-shot {:.4} ± {:.4}, 5-shot {:.4} ± {:.4} over {} test episodes",
            self.variant.as_str(),
            self.one_shot_accuracy,
            self.one_shot_half_width,
            self.five_shot_accuracy,
            self.five_shot_half_width,
            self.episodes
        )
    }
}

/// Scores a saved checkpoint on its own test split at 1-shot and 5-shot,
/// printing the row and writing it as CSV next to `out` when given.
///
/// The dataset and splits are rebuilt from the run config embedded in the
/// checkpoint, so the test classes are exactly the ones held out during
/// training. `seed` fixes the evaluation episodes.
pub fn run_eval(checkpoint_path: &Path, episodes: usize, seed: u64, out: Option<&Path>) -> Result<AccuracyRow> {
    if episodes == 0 {
        return Err(Error::invalid("run_eval", "episodes must be positive"));
    }
    let checkpoint = Checkpoint::load(checkpoint_path)?;
    let embedded = checkpoint.run_config.as_deref().ok_or_else(|| {
        Error::invalid("run_eval", "checkpoint does not embed a run config; cannot rebuild the test split")
    })?;
    let config = RunConfig::from_toml(embedded)?;
    let dataset = config.dataset.load()?;
    let splits = build_class_splits(
        &dataset.class_ids(),
        (config.splits.train, config.splits.val, config.splits.test),
        config.splits.seed,
    )?;
    let eval_seeds = SeedRecord::derive(seed);

    let accuracy_at = |shots: usize| -> Result<f64> {
        let mut cfg = checkpoint.config.clone();
        cfg.shots = shots;
        let mut model = Model::from_parts(cfg, checkpoint.params.clone(), checkpoint.norms.clone())?;
        let mut sampler = EpisodeSampler::new(
            &dataset,
            &splits.test,
            checkpoint.config.ways,
            shots,
            AugmentPolicy::disabled(),
            eval_seeds.test_stream,
        )?;
        Ok(evaluate(&mut model, &mut sampler, episodes, SplitKind::Test, checkpoint.epoch)?.accuracy)
    };

    let one = accuracy_at(1)?;
    let five = accuracy_at(5)?;
    let row = AccuracyRow {
        variant: config.variant,
        episodes,
        one_shot_accuracy: one,
        one_shot_half_width: binomial_half_width(one, episodes),
        five_shot_accuracy: five,
        five_shot_half_width: binomial_half_width(five, episodes),
    };
    println!("{}", row.summary());
    if let Some(path) = out {
        fs::write(path, row.csv()).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(row)
}

/// Partitions the class directories under `classes_dir` and writes the
/// manifest to `out`.
pub fn run_splits(classes_dir: &Path, counts: (usize, usize, usize), seed: u64, out: &Path) -> Result<ClassSplits> {
    let mut ids: Vec<String> = fs::read_dir(classes_dir)
        .map_err(|e| Error::io(classes_dir.display().to_string(), e))?
        .filter_map(|entry| entry.ok())
        .filter(|entry| entry.path().is_dir())
        .filter_map(|entry| entry.file_name().to_str().map(str::to_owned))
        .collect();
    ids.sort();
    let splits = build_class_splits(&ids, counts, seed)?;
    write_split_manifest(out, &splits)?;
    Ok(splits)
}

/// Renders a synthetic dataset to disk as a directory-per-class PNG tree,
/// ready for `ingest_dataset`. Returns the number of files written.
pub fn run_synth(classes: usize, per_class: usize, image_size: usize, seed: u64, out_dir: &Path) -> Result<usize> {
    let dataset = synth_dataset_generate(classes, per_class, image_size, seed)?;
    let mut written = 0usize;
    for class in dataset.classes() {
        let class_dir = out_dir.join(&class.id);
        fs::create_dir_all(&class_dir).map_err(|e| Error::io(class_dir.display().to_string(), e))?;
        for (i, img) in class.images.iter().enumerate() {
            let (h, w) = (img.shape()[0] as u32, img.shape()[1] as u32);
            let bytes: Vec<u8> =
                img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            let rgb = image::RgbImage::from_raw(w, h, bytes)
                .ok_or_else(|| Error::invalid("run_synth", "image buffer size mismatch"))?;
            let path = class_dir.join(format!("img_{i:03}.png"));
            rgb.save(&path)
                .map_err(|e| Error::invalid("run_synth", format!("writing {}: {e}", path.display())))?;
            written += 1;
        }
    }
    Ok(written)
}
