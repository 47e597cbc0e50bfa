//! Self-describing checkpoint container.
//!
//! Layout: the magic `MACOCKPT`, a little-endian u32 format version, a
//! little-endian u64 header length, a JSON header, then one blob of raw
//! little-endian f32 values. Parameters and optimizer moments live in the
//! blob and round-trip bit-exactly; running statistics and scalar metadata
//! live in the header (JSON floats use shortest-exact formatting, so they
//! round-trip too).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::episodes::AugmentPolicy;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{NormStore, ParamStore, RunningStats, Tensor};

use super::{NadamState, SeedRecord};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MACOCKPT";

/// A complete training snapshot: everything needed to resume or evaluate.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub policy: AugmentPolicy,
    pub seeds: SeedRecord,
    pub epoch: usize,
    pub val_accuracy: f64,
    pub params: ParamStore<f32>,
    pub norms: NormStore<f32>,
    pub optimizer: NadamState<f32>,
    /// Resolved run configuration, serialized by the layer that owns it.
    pub run_config: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct NormEntry {
    path: String,
    mean: Vec<f32>,
    var: Vec<f32>,
}

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq)]
enum Section {
    Param,
    MomentM,
    MomentV,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    section: Section,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    policy: AugmentPolicy,
    seeds: SeedRecord,
    epoch: usize,
    val_accuracy: f64,
    optimizer: OptimizerHeader,
    norms: Vec<NormEntry>,
    tensors: Vec<TensorEntry>,
    run_config: Option<String>,
}

impl Checkpoint {
    /// Snapshots the model and optimizer by value.
    pub fn capture(
        model: &Model<f32>,
        optimizer: &NadamState<f32>,
        policy: &AugmentPolicy,
        seeds: &SeedRecord,
        epoch: usize,
        val_accuracy: f64,
    ) -> Self {
        Checkpoint {
            config: model.config.clone(),
            policy: policy.clone(),
            seeds: *seeds,
            epoch,
            val_accuracy,
            params: model.params.clone(),
            norms: model.norms.clone(),
            optimizer: optimizer.clone(),
            run_config: None,
        }
    }

    /// Rebuilds the stored model, validating shapes against the config.
    pub fn to_model(&self) -> Result<Model<f32>> {
        Model::from_parts(self.config.clone(), self.params.clone(), self.norms.clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tensors = Vec::new();
        let mut blob: Vec<u8> = Vec::new();
        let mut push = |name: &str, section: Section, t: &Tensor<f32>, out: &mut Vec<u8>| {
            let offset = out.len() as u64;
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry { name: name.to_string(), section, shape: t.shape().to_vec(), offset });
        };
        for (name, t) in self.params.iter() {
            push(name, Section::Param, t, &mut blob);
        }
        for (name, m, v) in self.optimizer.moments() {
            push(name, Section::MomentM, m, &mut blob);
            push(name, Section::MomentV, v, &mut blob);
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            policy: self.policy.clone(),
            seeds: self.seeds,
            epoch: self.epoch,
            val_accuracy: self.val_accuracy,
            optimizer: OptimizerHeader {
                learning_rate: self.optimizer.learning_rate,
                beta1: self.optimizer.beta1,
                beta2: self.optimizer.beta2,
                epsilon: self.optimizer.epsilon,
                step: self.optimizer.step,
            },
            norms: self
                .norms
                .iter()
                .map(|(path, s)| NormEntry { path: path.clone(), mean: s.mean.clone(), var: s.var.clone() })
                .collect(),
            tensors,
            run_config: self.run_config.clone(),
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;

        let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = std::io::BufWriter::new(file);
        let write = |w: &mut std::io::BufWriter<std::fs::File>, bytes: &[u8]| {
            w.write_all(bytes).map_err(|e| Error::io(path.display().to_string(), e))
        };
        write(&mut w, MAGIC)?;
        write(&mut w, &CHECKPOINT_VERSION.to_le_bytes())?;
        write(&mut w, &(header_bytes.len() as u64).to_le_bytes())?;
        write(&mut w, &header_bytes)?;
        write(&mut w, &blob)?;
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let fail = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
        if bytes.len() < MAGIC.len() + 4 + 8 {
            return Err(fail("file too short for the fixed preamble"));
        }
        if &bytes[..8] != MAGIC {
            return Err(fail("bad magic; not a checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("fixed width"));
        if version != CHECKPOINT_VERSION {
            return Err(fail(&format!(
                "format version {version} unsupported (this build reads {CHECKPOINT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("fixed width")) as usize;
        let blob_start = 20 + header_len;
        if bytes.len() < blob_start {
            return Err(fail("declared header length exceeds the file"));
        }
        let header: Header = serde_json::from_slice(&bytes[20..blob_start])
            .map_err(|e| fail(&format!("header parse failed: {e}")))?;
        let blob = &bytes[blob_start..];

        let read_tensor = |entry: &TensorEntry| -> Result<Tensor<f32>> {
            let count: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 4 * count;
            if end > blob.len() {
                return Err(fail(&format!("tensor {} overruns the value blob", entry.name)));
            }
            let data = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("fixed width")))
                .collect();
            Tensor::new(entry.shape.clone(), data)
        };

        let mut params = ParamStore::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for entry in &header.tensors {
            let tensor = read_tensor(entry)?;
            match entry.section {
                Section::Param => params.insert(entry.name.clone(), tensor)?,
                Section::MomentM => {
                    m.insert(entry.name.clone(), tensor);
                }
                Section::MomentV => {
                    v.insert(entry.name.clone(), tensor);
                }
            }
        }
        let mut norms = NormStore::new();
        for entry in header.norms {
            if entry.mean.len() != entry.var.len() {
                return Err(fail(&format!("running stats for {} are inconsistent", entry.path)));
            }
            norms.insert(entry.path, RunningStats { mean: entry.mean, var: entry.var })?;
        }
        let optimizer = NadamState::from_parts(
            header.optimizer.learning_rate,
            header.optimizer.beta1,
            header.optimizer.beta2,
            header.optimizer.epsilon,
            header.optimizer.step,
            m,
            v,
        )?;
        Ok(Checkpoint {
            config: header.config,
            policy: header.policy,
            seeds: header.seeds,
            epoch: header.epoch,
            val_accuracy: header.val_accuracy,
            params,
            norms,
            optimizer,
            run_config: header.run_config,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_checkpoint() -> Checkpoint {
        let config = ModelConfig {
            image_size: 8,
            conv_blocks: 2,
            conv_channels: 4,
            feature_dim: 12,
            embed_dim: 8,
            relational_depth: 2,
            conditioning_depth: 2,
            shots: 2,
            ..ModelConfig::default()
        };
        let mut model: Model<f32> = Model::new(config, 3).unwrap();
        // Perturb a value so the saved state is not all-initializer.
        model.params.get_mut("feature/dense/bias").unwrap().data_mut()[0] = 0.137f32;
        let mut opt = NadamState::new(0.001);
        // One step builds real moment buffers.
        model.params.clear_grads();
        for (_, t) in model.params.iter_mut() {
            let n = t.numel();
            t.set_grad(vec![0.01; n]).unwrap();
        }
        nadam_step(&mut model.params, &mut opt).unwrap();
        Checkpoint::capture(&model, &opt, &AugmentPolicy::default(), &SeedRecord::derive(5), 3, 0.625)
    }

    use super::super::nadam_step;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = toy_checkpoint();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();

        assert_eq!(back.config, ck.config);
        assert_eq!(back.policy, ck.policy);
        assert_eq!(back.seeds, ck.seeds);
        assert_eq!(back.epoch, 3);
        assert_eq!(back.val_accuracy.to_bits(), ck.val_accuracy.to_bits());
        assert_eq!(back.params.len(), ck.params.len());
        for (path, t) in ck.params.iter() {
            let got = back.params.get(path).unwrap();
            assert_eq!(got.shape(), t.shape());
            let same = got
                .data()
                .iter()
                .zip(t.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "parameter {path} changed across the round trip");
        }
        for ((pa, sa), (pb, sb)) in ck.norms.iter().zip(back.norms.iter()) {
            assert_eq!(pa, pb);
            assert_eq!(sa, sb);
        }
        assert_eq!(back.optimizer, ck.optimizer);
        let rebuilt = back.to_model().unwrap();
        assert_eq!(
            rebuilt.params.get("feature/dense/bias").unwrap().data()[0].to_bits(),
            ck.params.get("feature/dense/bias").unwrap().data()[0].to_bits(),
        );
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, b"definitely not a checkpoint").unwrap();
        assert!(matches!(Checkpoint::load(&bad), Err(Error::Checkpoint(_))));

        let path = dir.path().join("model.ckpt");
        toy_checkpoint().save(&path).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&bad, &full[..full.len() / 2]).unwrap();
        assert!(Checkpoint::load(&bad).is_err());

        // Flip the version field.
        let mut tampered = full.clone();
        tampered[8] = 99;
        std::fs::write(&bad, &tampered).unwrap();
        let err = Checkpoint::load(&bad).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(msg) if msg.contains("version")));

        assert!(Checkpoint::load(dir.path().join("absent.ckpt")).is_err());
    }

    #[test]
    fn run_config_blob_survives() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut ck = toy_checkpoint();
        ck.run_config = Some("ways = 5\nshots = 5\n".into());
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.run_config.as_deref(), Some("ways = 5\nshots = 5\n"));
    }
}
