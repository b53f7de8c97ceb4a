//! The known-digit × method AUROC matrix on noisy MNIST.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::roc::{roc_auc, RocResult};
use crate::dataset::{build_splits, ClassRole, DatasetSplit, MnistCorpus, NoiseConfig, SplitSpec};
use crate::detector::{reconstruct_samples, score_samples, write_scores_csv, Method, Models, ScoreRecord};
use crate::error::{Error, Result};
use crate::nn::{save_checkpoint, train_cnn, train_vae, CnnArch, TrainConfig, TrainState, VaeArch};

pub const REPORT_SCHEMA_VERSION: u64 = 1;
const CURVE_POINTS: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// `known_anomaly_digit` is replaced per cell; `seed` per seed run.
    pub split: SplitSpec,
    pub noise: NoiseConfig,
    pub known_digits: Vec<u8>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub vae_arch: VaeArch,
    pub cnn_arch: CnnArch,
    pub vae_train: TrainConfig,
    pub cnn_train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            split: SplitSpec::default(),
            noise: NoiseConfig::default(),
            known_digits: vec![1, 3, 5, 7, 9],
            methods: Method::ALL.to_vec(),
            seeds: vec![0],
            vae_arch: VaeArch::default(),
            cnn_arch: CnnArch::default(),
            vae_train: TrainConfig::vae(),
            cnn_train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.known_digits.is_empty() || self.methods.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidConfig(
                "digits, methods and seeds must be non-empty".into(),
            ));
        }
        for &d in &self.known_digits {
            SplitSpec {
                known_anomaly_digit: d,
                ..self.split.clone()
            }
            .validate()?;
        }
        self.noise.validate()?;
        self.vae_arch.validate()?;
        self.cnn_arch.validate()?;
        self.vae_train.validate()?;
        self.cnn_train.validate()
    }
}

/// One (seed, known digit, method) entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub seed: u64,
    pub known_digit: u8,
    pub method: Method,
    pub auroc: Option<f64>,
    pub normals: usize,
    pub anomalies: usize,
    /// Thinned (fpr, tpr) points for plotting.
    pub curve: Vec<[f64; 2]>,
    pub error: Option<String>,
}

impl CellResult {
    pub fn from_roc(
        seed: u64,
        known_digit: u8,
        method: Method,
        roc: &RocResult,
        normals: usize,
        anomalies: usize,
    ) -> Self {
        Self {
            seed,
            known_digit,
            method,
            auroc: Some(roc.auc),
            normals,
            anomalies,
            curve: roc.thinned(CURVE_POINTS),
            error: None,
        }
    }

    pub fn failed(seed: u64, known_digit: u8, method: Method, error: &Error) -> Self {
        Self {
            seed,
            known_digit,
            method,
            auroc: None,
            normals: 0,
            anomalies: 0,
            curve: Vec::new(),
            error: Some(error.to_string()),
        }
    }
}

/// AUROC per known digit for one method, averaged over seeds, and the mean
/// across digits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub method: Method,
    pub per_digit: Vec<Option<f64>>,
    pub average: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub seed: u64,
    pub model: String,
    pub known_digit: Option<u8>,
    pub epochs: usize,
    pub final_train_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_seconds: f64,
    /// Stage name → seconds, e.g. `seed0/vae_train`, `seed0/digit3/score`.
    pub stages: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u64,
    pub complete: bool,
    /// Resolved run configuration as supplied by the caller.
    pub config: serde_json::Value,
    pub normal_digit: u8,
    pub known_digits: Vec<u8>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellResult>,
    pub matrix: Vec<MatrixRow>,
    pub training: Vec<TrainingSummary>,
    pub timings: Timings,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl ExperimentReport {
    /// Builds the matrix from `cells`. A (digit, method) entry is the mean
    /// over seeds and is missing if any seed failed; the average needs every
    /// digit.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        config: serde_json::Value,
        normal_digit: u8,
        known_digits: Vec<u8>,
        methods: Vec<Method>,
        seeds: Vec<u64>,
        cells: Vec<CellResult>,
        training: Vec<TrainingSummary>,
        timings: Timings,
    ) -> Self {
        let entry = |d: u8, m: Method| -> Option<f64> {
            let values: Option<Vec<f64>> = seeds
                .iter()
                .map(|&s| {
                    cells
                        .iter()
                        .find(|c| c.seed == s && c.known_digit == d && c.method == m)
                        .and_then(|c| c.auroc)
                })
                .collect();
            values.and_then(mean)
        };
        let matrix: Vec<MatrixRow> = methods
            .iter()
            .map(|&m| {
                let per_digit: Vec<Option<f64>> = known_digits.iter().map(|&d| entry(d, m)).collect();
                let average = per_digit.iter().copied().collect::<Option<Vec<f64>>>().and_then(mean);
                MatrixRow {
                    method: m,
                    per_digit,
                    average,
                }
            })
            .collect();
        let complete = matrix.iter().all(|r| r.average.is_some());
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            complete,
            config,
            normal_digit,
            known_digits,
            methods,
            seeds,
            cells,
            matrix,
            training,
            timings,
        }
    }

    pub fn row(&self, method: Method) -> Option<&MatrixRow> {
        self.matrix.iter().find(|r| r.method == method)
    }

    pub fn average(&self, method: Method) -> Option<f64> {
        self.row(method).and_then(|r| r.average)
    }

    pub fn cell(&self, known_digit: u8, method: Method) -> Option<f64> {
        let col = self.known_digits.iter().position(|&d| d == known_digit)?;
        self.row(method).and_then(|r| r.per_digit[col])
    }
}

/// ROC of one method's records (normal = negative, both anomaly roles =
/// positive).
pub fn roc_of_records(records: &[ScoreRecord], method: Method) -> Result<(RocResult, usize, usize)> {
    let (scores, labels): (Vec<f64>, Vec<bool>) = records
        .iter()
        .filter(|r| r.method == method)
        .map(|r| (r.score, r.role.is_anomaly()))
        .unzip();
    let anomalies = labels.iter().filter(|&&a| a).count();
    let roc = roc_auc(&scores, &labels)?;
    Ok((roc, labels.len() - anomalies, anomalies))
}

fn summary<M>(seed: u64, model: &str, known_digit: Option<u8>, state: &TrainState<M>, seconds: f64) -> TrainingSummary {
    let last = state.history.last();
    TrainingSummary {
        seed,
        model: model.to_string(),
        known_digit,
        epochs: state.epoch,
        final_train_loss: last.map(|r| r.train_loss),
        final_val_loss: last.map(|r| r.val_loss),
        val_accuracy: last.and_then(|r| r.val_accuracy),
        seconds,
    }
}

/// Runs every (seed, digit, method) cell. The VAE is trained once per seed
/// and its reconstructions of the evaluation set are shared by all digits.
/// Failures are recorded in the affected cells and leave the report
/// incomplete. With `artifacts`, checkpoints and per-cell score CSVs are
/// written beneath it.
pub fn run_known_digit_experiment(
    mnist: &MnistCorpus,
    config: &ExperimentConfig,
    echo: serde_json::Value,
    artifacts: Option<&Path>,
) -> Result<ExperimentReport> {
    config.validate()?;
    let start = Instant::now();
    let mut cells = Vec::new();
    let mut training = Vec::new();
    let mut timings = Timings::default();
    let needs_vae = config.methods.iter().any(|m| m.needs_vae());
    let needs_cnn = config.methods.iter().any(|m| m.needs_cnn());

    for &seed in &config.seeds {
        let split_for = |d: u8| -> Result<DatasetSplit> {
            let spec = SplitSpec {
                known_anomaly_digit: d,
                seed,
                ..config.split.clone()
            };
            build_splits(mnist, &spec, &config.noise)
        };
        let fail_all = |cells: &mut Vec<CellResult>, digits: &[u8], e: &Error| {
            for &d in digits {
                for &m in &config.methods {
                    cells.push(CellResult::failed(seed, d, m, e));
                }
            }
        };

        // 𝕌 and 𝕏 do not depend on the known digit.
        let base = match split_for(config.known_digits[0]) {
            Ok(s) => s,
            Err(e) => {
                log::error!("seed {seed}: building the split failed: {e}");
                fail_all(&mut cells, &config.known_digits, &e);
                continue;
            }
        };
        let eval_refs: Vec<_> = base.eval_all.iter().map(|e| &e.sample).collect();

        let vae_state = if needs_vae {
            let t = Instant::now();
            let vae_cfg = TrainConfig {
                seed,
                ..config.vae_train.clone()
            };
            match train_vae(&base, &config.vae_arch, &vae_cfg) {
                Ok(state) => {
                    let secs = t.elapsed().as_secs_f64();
                    timings.stages.insert(format!("seed{seed}/vae_train"), secs);
                    training.push(summary(seed, "vae", None, &state, secs));
                    if let Some(dir) = artifacts {
                        save_checkpoint(&dir.join(format!("seed{seed}/vae")), &state, echo.clone())?;
                    }
                    Some(state)
                }
                Err(e) => {
                    log::error!("seed {seed}: VAE training failed: {e}");
                    fail_all(&mut cells, &config.known_digits, &e);
                    continue;
                }
            }
        } else {
            None
        };
        let recons = match &vae_state {
            Some(state) => {
                let t = Instant::now();
                let r = reconstruct_samples(&state.model, &eval_refs)?;
                timings
                    .stages
                    .insert(format!("seed{seed}/reconstruct"), t.elapsed().as_secs_f64());
                Some(r)
            }
            None => None,
        };

        for &d in &config.known_digits {
            let cell = (|| -> Result<Vec<ScoreRecord>> {
                let cnn_state = if needs_cnn {
                    let split = split_for(d)?;
                    let t = Instant::now();
                    let cnn_cfg = TrainConfig {
                        seed,
                        ..config.cnn_train.clone()
                    };
                    let state = train_cnn(&split, &config.cnn_arch, &cnn_cfg)?;
                    let secs = t.elapsed().as_secs_f64();
                    timings.stages.insert(format!("seed{seed}/digit{d}/cnn_train"), secs);
                    training.push(summary(seed, "cnn", Some(d), &state, secs));
                    if let Some(dir) = artifacts {
                        save_checkpoint(&dir.join(format!("seed{seed}/cnn_digit{d}")), &state, echo.clone())?;
                    }
                    Some(state)
                } else {
                    None
                };
                let models = Models {
                    vae: vae_state.as_ref().map(|s| &s.model),
                    cnn: cnn_state.as_ref().map(|s| &s.model),
                };
                let samples: Vec<(_, ClassRole)> = base
                    .eval_all
                    .iter()
                    .map(|e| {
                        // Roles are relative to this cell's known digit.
                        let spec = SplitSpec {
                            known_anomaly_digit: d,
                            ..base.spec.clone()
                        };
                        (&e.sample, ClassRole::of(e.sample.digit_label, &spec))
                    })
                    .collect();
                let t = Instant::now();
                let records = score_samples(&models, &samples, &config.methods, recons.as_deref())?;
                timings
                    .stages
                    .insert(format!("seed{seed}/digit{d}/score"), t.elapsed().as_secs_f64());
                if let Some(dir) = artifacts {
                    let path = dir.join(format!("seed{seed}/scores_digit{d}.csv"));
                    std::fs::create_dir_all(path.parent().unwrap()).map_err(|source| Error::Io {
                        path: path.clone(),
                        source,
                    })?;
                    write_scores_csv(&records, &path)?;
                }
                Ok(records)
            })();
            match cell {
                Ok(records) => {
                    for &m in &config.methods {
                        cells.push(match roc_of_records(&records, m) {
                            Ok((roc, normals, anomalies)) => {
                                log::info!("seed {seed} digit {d} {m}: AUROC {:.4}", roc.auc);
                                CellResult::from_roc(seed, d, m, &roc, normals, anomalies)
                            }
                            Err(e) => CellResult::failed(seed, d, m, &e),
                        });
                    }
                }
                Err(e) => {
                    log::error!("seed {seed} digit {d}: {e}");
                    fail_all(&mut cells, &[d], &e);
                }
            }
        }
    }
    timings.total_seconds = start.elapsed().as_secs_f64();
    Ok(ExperimentReport::assemble(
        echo,
        config.split.normal_digit,
        config.known_digits.clone(),
        config.methods.clone(),
        config.seeds.clone(),
        cells,
        training,
        timings,
    ))
}
