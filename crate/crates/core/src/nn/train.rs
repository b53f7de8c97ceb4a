//! Minibatch training loops for the VAE (normal class only) and the
//! classifier (normal vs. known anomaly, class-balanced batches).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::cnn::{Cnn, CnnArch};
use super::model::Model;
use super::optim::{Adam, AdamConfig};
use super::tensor::Tensor;
use super::vae::{Vae, VaeArch};
use crate::dataset::{batch_tensor, DatasetSplit, ImageSample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub convergence_patience: usize,
    pub seed: u64,
    /// VAE only: the KL term's weight ramps linearly from 1/n to 1 over the
    /// first n epochs, which are also exempt from early stopping. 0 trains
    /// on the plain objective throughout.
    #[serde(default)]
    pub kl_warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-3,
            max_epochs: 50,
            convergence_patience: 5,
            seed: 0,
            kl_warmup_epochs: 0,
        }
    }
}

impl TrainConfig {
    /// The shared defaults plus a five-epoch KL warm-up.
    pub fn vae() -> Self {
        Self {
            kl_warmup_epochs: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate {} must be > 0",
                self.learning_rate
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidConfig("max_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState<M> {
    pub model: M,
    pub optimizer: Adam<f32>,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub best_val_loss: Option<f64>,
    pub stale_epochs: usize,
}

impl<M: Model<f32>> TrainState<M> {
    pub fn fresh(arch: &M::Arch, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = M::build(arch, config.seed)?;
        let optimizer = Adam::new(&model, AdamConfig::with_learning_rate(config.learning_rate));
        Ok(Self {
            model,
            optimizer,
            config: config.clone(),
            epoch: 0,
            history: Vec::new(),
            best_val_loss: None,
            stale_epochs: 0,
        })
    }

    pub fn converged(&self) -> bool {
        self.epoch >= self.config.max_epochs || self.stale_epochs >= self.config.convergence_patience
    }

    pub fn last_record(&self) -> Option<&EpochRecord> {
        self.history.last()
    }

    fn record(&mut self, record: EpochRecord, warming_up: bool) {
        match self.best_val_loss {
            Some(best) if record.val_loss >= best && !warming_up => self.stale_epochs += 1,
            _ => {
                self.best_val_loss = Some(record.val_loss);
                self.stale_epochs = 0;
            }
        }
        self.epoch = record.epoch;
        log::info!(
            "{} epoch {}: train {:.5} val {:.5}{}",
            M::KIND,
            record.epoch,
            record.train_loss,
            record.val_loss,
            record.val_accuracy.map(|a| format!(" acc {a:.4}")).unwrap_or_default()
        );
        self.history.push(record);
    }

    /// RNG for shuffling and sampling within one epoch; a pure function of
    /// the seed and the epoch index so resumed runs replay identically.
    fn epoch_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.epoch as u64 + 1);
        rng
    }
}

/// Deterministic fit/held-out partition of `n` items.
pub fn holdout_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    if n < 2 {
        return (idx.clone(), idx);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_4a11);
    idx.shuffle(&mut rng);
    let fit = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let held = idx.split_off(fit);
    (idx, held)
}

fn pick<'a>(samples: &'a [ImageSample], idx: &[usize]) -> Vec<&'a ImageSample> {
    idx.iter().map(|&i| &samples[i]).collect()
}

fn vae_validation_loss(model: &Vae<f32>, held: &[&ImageSample], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in held.chunks(batch) {
        let x = batch_tensor(chunk)?;
        let eps = Tensor::zeros(&[chunk.len(), model.latent_dim()]);
        total += model.loss(&x, &eps)?.total * chunk.len() as f64;
    }
    Ok(total / held.len() as f64)
}

/// Runs VAE epochs until convergence.
pub fn continue_vae(state: &mut TrainState<Vae<f32>>, fit: &[&ImageSample], held: &[&ImageSample]) -> Result<()> {
    if fit.is_empty() {
        return Err(Error::EmptyTrainingSet("normal class"));
    }
    let m = state.config.batch_size;
    let warmup = state.config.kl_warmup_epochs;
    while !state.converged() {
        let warming_up = state.epoch < warmup;
        let kl_weight = if warming_up {
            (state.epoch + 1) as f64 / warmup as f64
        } else {
            1.0
        };
        let mut rng = state.epoch_rng();
        let mut order: Vec<usize> = (0..fit.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(m).enumerate() {
            let batch: Vec<&ImageSample> = chunk.iter().map(|&i| fit[i]).collect();
            let x = batch_tensor(&batch)?;
            let latent = state.model.latent_dim();
            let eps_data = (0..batch.len() * latent)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let eps = Tensor::from_vec(&[batch.len(), latent], eps_data)?;
            let (loss, grad) = state.model.weighted_loss_and_grad(&x, &eps, kl_weight)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: state.epoch + 1,
                    batch: b,
                });
            }
            state.optimizer.update(&mut state.model, &grad);
            total += loss.total * batch.len() as f64;
        }
        let val_loss = vae_validation_loss(&state.model, held, m)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: state.epoch + 1,
                batch: usize::MAX,
            });
        }
        let record = EpochRecord {
            epoch: state.epoch + 1,
            train_loss: total / fit.len() as f64,
            val_loss,
            val_accuracy: None,
        };
        state.record(record, warming_up);
    }
    Ok(())
}

/// Trains the VAE on 𝕏 only; a held-out slice of 𝕏 drives early stopping.
pub fn train_vae(split: &DatasetSplit, arch: &VaeArch, config: &TrainConfig) -> Result<TrainState<Vae<f32>>> {
    let mut state = TrainState::fresh(arch, config)?;
    resume_vae(&mut state, split)?;
    Ok(state)
}

pub fn resume_vae(state: &mut TrainState<Vae<f32>>, split: &DatasetSplit) -> Result<()> {
    if split.train_normal.is_empty() {
        return Err(Error::EmptyTrainingSet("normal class"));
    }
    let (fit, held) = holdout_indices(split.train_normal.len(), split.spec.train_fraction, split.spec.seed);
    continue_vae(
        state,
        &pick(&split.train_normal, &fit),
        &pick(&split.train_normal, &held),
    )
}

/// Classifier fit/held-out samples; label 1 = normal, 0 = known anomaly.
pub struct ClassifierData<'a> {
    pub fit_normal: Vec<&'a ImageSample>,
    pub fit_anomaly: Vec<&'a ImageSample>,
    pub held_normal: Vec<&'a ImageSample>,
    pub held_anomaly: Vec<&'a ImageSample>,
}

impl<'a> ClassifierData<'a> {
    pub fn from_split(split: &'a DatasetSplit) -> Result<Self> {
        if split.train_normal.is_empty() {
            return Err(Error::EmptyTrainingSet("normal class"));
        }
        if split.train_known_anomaly.is_empty() {
            return Err(Error::EmptyTrainingSet("known-anomaly class"));
        }
        let frac = split.spec.train_fraction;
        let (fn_idx, hn_idx) = holdout_indices(split.train_normal.len(), frac, split.spec.seed);
        let (fa_idx, ha_idx) = holdout_indices(split.train_known_anomaly.len(), frac, split.spec.seed.wrapping_add(1));
        Ok(Self {
            fit_normal: pick(&split.train_normal, &fn_idx),
            fit_anomaly: pick(&split.train_known_anomaly, &fa_idx),
            held_normal: pick(&split.train_normal, &hn_idx),
            held_anomaly: pick(&split.train_known_anomaly, &ha_idx),
        })
    }
}

/// Class-balanced held-out loss and plain held-out accuracy.
pub fn classifier_holdout(model: &Cnn<f32>, data: &ClassifierData<'_>, batch: usize) -> Result<(f64, f64)> {
    let mut correct = 0usize;
    let mut class_losses = [0.0; 2];
    for (c, (samples, label)) in [(&data.held_normal, 1.0), (&data.held_anomaly, 0.0)]
        .into_iter()
        .enumerate()
    {
        let mut sum = 0.0;
        for chunk in samples.chunks(batch) {
            let x = batch_tensor(chunk)?;
            for p in model.normal_probabilities(&x)? {
                let p = f64::from(p);
                sum += (label - p) * (label - p);
                if (p > 0.5) == (label == 1.0) {
                    correct += 1;
                }
            }
        }
        class_losses[c] = sum / samples.len() as f64;
    }
    let total = data.held_normal.len() + data.held_anomaly.len();
    Ok((0.5 * (class_losses[0] + class_losses[1]), correct as f64 / total as f64))
}

pub fn continue_cnn(state: &mut TrainState<Cnn<f32>>, data: &ClassifierData<'_>) -> Result<()> {
    if data.fit_normal.is_empty() || data.fit_anomaly.is_empty() {
        return Err(Error::EmptyTrainingSet("classifier needs both classes"));
    }
    let m = state.config.batch_size;
    let half = (m / 2).max(1);
    let other = (m - half).max(1);
    while !state.converged() {
        let mut rng = state.epoch_rng();
        let mut normal_order: Vec<usize> = (0..data.fit_normal.len()).collect();
        let mut anomaly_order: Vec<usize> = (0..data.fit_anomaly.len()).collect();
        normal_order.shuffle(&mut rng);
        anomaly_order.shuffle(&mut rng);
        // Each batch is half 𝕏, half 𝔸; the smaller class wraps around.
        let batches = data
            .fit_normal
            .len()
            .div_ceil(half)
            .max(data.fit_anomaly.len().div_ceil(other));
        let mut total = 0.0;
        let mut seen = 0usize;
        for b in 0..batches {
            let mut batch = Vec::with_capacity(half + other);
            let mut labels = Vec::with_capacity(half + other);
            for j in 0..half {
                batch.push(data.fit_normal[normal_order[(b * half + j) % normal_order.len()]]);
                labels.push(1.0);
            }
            for j in 0..other {
                batch.push(data.fit_anomaly[anomaly_order[(b * other + j) % anomaly_order.len()]]);
                labels.push(0.0);
            }
            let x = batch_tensor(&batch)?;
            let (loss, grad) = state.model.loss_and_grad(&x, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: state.epoch + 1,
                    batch: b,
                });
            }
            state.optimizer.update(&mut state.model, &grad);
            total += loss * batch.len() as f64;
            seen += batch.len();
        }
        let (val_loss, accuracy) = classifier_holdout(&state.model, data, m)?;
        let record = EpochRecord {
            epoch: state.epoch + 1,
            train_loss: total / seen as f64,
            val_loss,
            val_accuracy: Some(accuracy),
        };
        state.record(record, false);
    }
    Ok(())
}

/// Trains the classifier on 𝕏 ∪ 𝔸.
pub fn train_cnn(split: &DatasetSplit, arch: &CnnArch, config: &TrainConfig) -> Result<TrainState<Cnn<f32>>> {
    let data = ClassifierData::from_split(split)?;
    let mut state = TrainState::fresh(arch, config)?;
    continue_cnn(&mut state, &data)?;
    Ok(state)
}

pub fn resume_cnn(state: &mut TrainState<Cnn<f32>>, split: &DatasetSplit) -> Result<()> {
    let data = ClassifierData::from_split(split)?;
    continue_cnn(state, &data)
}
