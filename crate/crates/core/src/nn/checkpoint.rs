//! Checkpoint directories: `metadata.json` plus one safetensors file per
//! named array (model parameters and optimizer moments).
//!
//! The metadata records a SHA-256 for every array file and an integrity
//! digest over the metadata itself, so edited architecture, history or
//! arrays are all rejected at load time.

use std::fs;
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::Model;
use super::optim::{Adam, AdamConfig};
use super::tensor::Tensor;
use super::train::{EpochRecord, TrainConfig, TrainState};
use crate::error::{Error, IoContext, Result};

pub const CHECKPOINT_SCHEMA_VERSION: u64 = 1;
const METADATA: &str = "metadata.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u64,
    pub kind: String,
    pub dtype: String,
    pub architecture: serde_json::Value,
    pub train_config: TrainConfig,
    pub seed: u64,
    pub epoch: usize,
    pub loss_history: Vec<EpochRecord>,
    pub best_val_loss: Option<f64>,
    pub stale_epochs: usize,
    pub optimizer: OptimizerMeta,
    pub parameters: Vec<ArrayEntry>,
    pub optimizer_state: Vec<ArrayEntry>,
    /// Free-form provenance (e.g. the resolved run configuration).
    #[serde(default)]
    pub extra: serde_json::Value,
    pub integrity: String,
}

impl CheckpointMeta {
    fn digest(&self) -> Result<String> {
        let mut blank = self.clone();
        blank.integrity.clear();
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&blank)?)))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(METADATA);
        let text = fs::read_to_string(&path).at(&path)?;
        let raw: serde_json::Value = serde_json::from_str(&text)?;
        match raw.get("schema_version").and_then(serde_json::Value::as_u64) {
            Some(CHECKPOINT_SCHEMA_VERSION) => {}
            Some(found) => {
                return Err(Error::SchemaVersion {
                    found,
                    expected: CHECKPOINT_SCHEMA_VERSION,
                })
            }
            None => return Err(Error::Checkpoint("metadata lacks schema_version".into())),
        }
        let meta: CheckpointMeta = serde_json::from_value(raw)?;
        if meta.digest()? != meta.integrity {
            return Err(Error::Checkpoint(
                "metadata integrity digest does not match its contents".into(),
            ));
        }
        Ok(meta)
    }
}

fn file_name(name: &str) -> String {
    format!("{name}.safetensors")
}

fn write_array(dir: &Path, name: &str, tensor: &Tensor<f32>) -> Result<ArrayEntry> {
    let bytes: Vec<u8> = tensor.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let view = TensorView::new(Dtype::F32, tensor.shape().to_vec(), &bytes)
        .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
    let encoded =
        safetensors::serialize([(name, view)], None).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
    let file = file_name(name);
    let path = dir.join(&file);
    fs::write(&path, &encoded).at(&path)?;
    Ok(ArrayEntry {
        name: name.to_string(),
        file,
        shape: tensor.shape().to_vec(),
        sha256: hex::encode(Sha256::digest(&encoded)),
    })
}

fn read_array(dir: &Path, entry: &ArrayEntry) -> Result<Tensor<f32>> {
    let path = dir.join(&entry.file);
    let encoded = fs::read(&path).at(&path)?;
    if hex::encode(Sha256::digest(&encoded)) != entry.sha256 {
        return Err(Error::Checkpoint(format!(
            "{} does not match its recorded digest",
            entry.file
        )));
    }
    let st = SafeTensors::deserialize(&encoded).map_err(|e| Error::Checkpoint(format!("{}: {e}", entry.file)))?;
    let view = st
        .tensor(&entry.name)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", entry.file)))?;
    if view.dtype() != Dtype::F32 || view.shape() != entry.shape.as_slice() {
        return Err(Error::Checkpoint(format!(
            "{}: stored {:?} {:?}, metadata says f32 {:?}",
            entry.file,
            view.dtype(),
            view.shape(),
            entry.shape
        )));
    }
    let data = view
        .data()
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::from_vec(&entry.shape, data)
}

/// Writes `state` into `dir` (created if needed).
pub fn save_checkpoint<M: Model<f32>>(
    dir: &Path,
    state: &TrainState<M>,
    extra: serde_json::Value,
) -> Result<CheckpointMeta> {
    fs::create_dir_all(dir).at(dir)?;
    let mut parameters = Vec::new();
    let mut optimizer_state = Vec::new();
    for (i, (name, tensor)) in state.model.parameters().into_iter().enumerate() {
        parameters.push(write_array(dir, &name, tensor)?);
        optimizer_state.push(write_array(
            dir,
            &format!("adam_m.{name}"),
            &state.optimizer.first_moment[i],
        )?);
        optimizer_state.push(write_array(
            dir,
            &format!("adam_v.{name}"),
            &state.optimizer.second_moment[i],
        )?);
    }
    let c = state.optimizer.config;
    let mut meta = CheckpointMeta {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        kind: M::KIND.to_string(),
        dtype: "f32".to_string(),
        architecture: serde_json::to_value(state.model.arch())?,
        train_config: state.config.clone(),
        seed: state.config.seed,
        epoch: state.epoch,
        loss_history: state.history.clone(),
        best_val_loss: state.best_val_loss,
        stale_epochs: state.stale_epochs,
        optimizer: OptimizerMeta {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.epsilon,
            step: state.optimizer.step,
        },
        parameters,
        optimizer_state,
        extra,
        integrity: String::new(),
    };
    meta.integrity = meta.digest()?;
    let path = dir.join(METADATA);
    fs::write(&path, serde_json::to_string_pretty(&meta)?).at(&path)?;
    Ok(meta)
}

/// Restores a training state, including optimizer moments, from `dir`.
pub fn load_checkpoint<M: Model<f32>>(dir: &Path) -> Result<TrainState<M>> {
    let meta = CheckpointMeta::read(dir)?;
    if meta.kind != M::KIND {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds a {}, expected a {}",
            meta.kind,
            M::KIND
        )));
    }
    if meta.dtype != "f32" {
        return Err(Error::Checkpoint(format!("unsupported dtype {}", meta.dtype)));
    }
    let arch: M::Arch = serde_json::from_value(meta.architecture.clone())
        .map_err(|e| Error::Checkpoint(format!("architecture does not describe a {}: {e}", M::KIND)))?;
    let mut model = M::build(&arch, 0)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .parameters()
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect();
    let recorded: Vec<(String, Vec<usize>)> = meta
        .parameters
        .iter()
        .map(|e| (e.name.clone(), e.shape.clone()))
        .collect();
    if expected != recorded {
        return Err(Error::Checkpoint(
            "parameter names or shapes disagree with the architecture".into(),
        ));
    }
    for ((_, slot), entry) in model.parameters_mut().into_iter().zip(&meta.parameters) {
        *slot = read_array(dir, entry)?;
    }
    let o = &meta.optimizer;
    let mut optimizer = Adam::new(
        &model,
        AdamConfig {
            learning_rate: o.learning_rate,
            beta1: o.beta1,
            beta2: o.beta2,
            epsilon: o.epsilon,
        },
    );
    optimizer.step = o.step;
    if meta.optimizer_state.len() != 2 * meta.parameters.len() {
        return Err(Error::Checkpoint("optimizer state is incomplete".into()));
    }
    for (i, pair) in meta.optimizer_state.chunks(2).enumerate() {
        optimizer.first_moment[i] = read_array(dir, &pair[0])?;
        optimizer.second_moment[i] = read_array(dir, &pair[1])?;
        if optimizer.first_moment[i].shape() != meta.parameters[i].shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "optimizer moment {} has the wrong shape",
                pair[0].name
            )));
        }
    }
    Ok(TrainState {
        model,
        optimizer,
        config: meta.train_config,
        epoch: meta.epoch,
        history: meta.loss_history,
        best_val_loss: meta.best_val_loss,
        stale_epochs: meta.stale_epochs,
    })
}

/// Convenience for inference: the model alone.
pub fn load_model<M: Model<f32>>(dir: &Path) -> Result<M> {
    load_checkpoint::<M>(dir).map(|s| s.model)
}
