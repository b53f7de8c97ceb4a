//! Resolved run configuration: built-in defaults, then an optional JSON file,
//! then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use spade_core::dataset::{NoiseConfig, SplitSpec};
use spade_core::detector::{DetectorConfig, Method};
use spade_core::nn::{CnnArch, TrainConfig, VaeArch};

pub const DATA_DIR_ENV: &str = "SPADE_DATA_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentOptions {
    pub known_digits: Vec<u8>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            known_digits: vec![1, 3, 5, 7, 9],
            methods: Method::ALL.to_vec(),
            seeds: vec![0],
        }
    }
}

/// Deployment decision settings; without a threshold no decisions are made.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorOptions {
    pub method: Method,
    pub threshold: Option<f64>,
}

impl Default for DetectorOptions {
    fn default() -> Self {
        Self {
            method: Method::Spade,
            threshold: None,
        }
    }
}

impl DetectorOptions {
    pub fn config(&self) -> Option<DetectorConfig> {
        self.threshold.map(|threshold| DetectorConfig {
            threshold,
            method: self.method,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root for the MNIST files and generated corpora.
    pub data_dir: PathBuf,
    /// Directory holding the four IDX files; defaults to `<data_dir>/mnist`.
    pub mnist_dir: Option<PathBuf>,
    /// Generated corpus; defaults to `<data_dir>/corpus`.
    pub corpus_dir: Option<PathBuf>,
    /// Where checkpoints, scores and reports go by default.
    pub runs_dir: PathBuf,
    pub split: SplitSpec,
    pub noise: NoiseConfig,
    pub vae_arch: VaeArch,
    pub cnn_arch: CnnArch,
    pub vae_train: TrainConfig,
    pub cnn_train: TrainConfig,
    pub detector: DetectorOptions,
    pub experiment: ExperimentOptions,
    /// Worker threads; all cores when absent.
    pub jobs: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            mnist_dir: None,
            corpus_dir: None,
            runs_dir: PathBuf::from("runs"),
            split: SplitSpec::default(),
            noise: NoiseConfig::default(),
            vae_arch: VaeArch::default(),
            cnn_arch: CnnArch::default(),
            vae_train: TrainConfig::vae(),
            cnn_train: TrainConfig::default(),
            detector: DetectorOptions::default(),
            experiment: ExperimentOptions::default(),
            jobs: None,
        }
    }
}

impl RunConfig {
    pub fn mnist_dir(&self) -> PathBuf {
        self.mnist_dir.clone().unwrap_or_else(|| self.data_dir.join("mnist"))
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.corpus_dir.clone().unwrap_or_else(|| self.data_dir.join("corpus"))
    }

    pub fn echo(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Recursively overlays `patch` onto `base`; objects merge key by key,
/// everything else replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets a dotted path such as `vae_train.max_epochs`.
pub fn set_path(root: &mut Value, path: &str, value: Value) {
    let mut cur = root;
    for key in path.split('.') {
        if !cur.is_object() {
            *cur = Value::Object(Default::default());
        }
        cur = cur.as_object_mut().unwrap().entry(key).or_insert(Value::Null);
    }
    *cur = value;
}

/// Layers defaults, the optional config file and `overrides` (dotted path,
/// value) in that order.
pub fn resolve(file: Option<&Path>, overrides: Vec<(String, Value)>) -> anyhow::Result<RunConfig> {
    let mut root = serde_json::to_value(RunConfig::default())?;
    if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
        set_path(&mut root, "data_dir", Value::String(dir));
    }
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let patch: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if !patch.is_object() {
            bail!("config file {} must hold a JSON object", path.display());
        }
        merge(&mut root, patch);
    }
    for (path, value) in overrides {
        set_path(&mut root, &path, value);
    }
    let config: RunConfig = serde_json::from_value(root).context("invalid configuration")?;
    config.split.validate()?;
    config.noise.validate()?;
    config.vae_arch.validate()?;
    config.cnn_arch.validate()?;
    config.vae_train.validate()?;
    config.cnn_train.validate()?;
    if let Some(d) = config.detector.config() {
        d.validate()?;
    }
    if config.jobs == Some(0) {
        bail!("jobs must be at least 1");
    }
    Ok(config)
}
