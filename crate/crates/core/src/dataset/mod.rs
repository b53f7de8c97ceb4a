//! Noisy-MNIST benchmark: seeded generation, class-role assignment and
//! on-disk corpora.
//!
//! Each source digit is resized to a random side length, dropped at a random
//! position inside an 84×84 zero frame and covered with per-image Gaussian
//! noise whose standard deviation is itself random. Every sample draws from
//! its own RNG stream derived from `(seed, partition, source index)`, so a
//! noisy test image is identical across splits that differ only in the known
//! anomaly digit, and generation can run in parallel.

mod corpus;
mod mnist;

use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use corpus::{
    load_corpus, load_training_corpus, save_corpus, CorpusManifest, ManifestEntry, CORPUS_SCHEMA_VERSION,
};
pub use mnist::{CleanDigit, MnistCorpus, MNIST_SIDE};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::raster::resize_bilinear;

/// Role of a sample relative to a split: 𝕏, 𝔸 or the rest of 𝕌.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassRole {
    Normal,
    KnownAnomaly,
    UnknownAnomaly,
}

impl ClassRole {
    pub fn of(digit: u8, spec: &SplitSpec) -> Self {
        if digit == spec.normal_digit {
            ClassRole::Normal
        } else if digit == spec.known_anomaly_digit {
            ClassRole::KnownAnomaly
        } else {
            ClassRole::UnknownAnomaly
        }
    }

    pub fn is_anomaly(self) -> bool {
        self != ClassRole::Normal
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassRole::Normal => "normal",
            ClassRole::KnownAnomaly => "known_anomaly",
            ClassRole::UnknownAnomaly => "unknown_anomaly",
        }
    }
}

impl std::fmt::Display for ClassRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub normal_digit: u8,
    pub known_anomaly_digit: u8,
    /// Fraction of 𝕏 and 𝔸 used for fitting; the remainder is held out for
    /// convergence checks.
    pub train_fraction: f64,
    pub seed: u64,
    /// Cap on training images taken per class (first N in source order).
    #[serde(default)]
    pub max_train_per_class: Option<usize>,
    /// Cap on evaluation images taken per digit (first N in source order).
    #[serde(default)]
    pub max_eval_per_digit: Option<usize>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            normal_digit: 0,
            known_anomaly_digit: 3,
            train_fraction: 0.9,
            seed: 0,
            max_train_per_class: None,
            max_eval_per_digit: None,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.normal_digit > 9 || self.known_anomaly_digit > 9 {
            return Err(Error::InvalidConfig("digits must lie in 0..=9".into()));
        }
        if self.normal_digit == self.known_anomaly_digit {
            return Err(Error::InvalidConfig(format!(
                "normal and known-anomaly digit are both {}",
                self.normal_digit
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "train_fraction {} outside (0, 1)",
                self.train_fraction
            )));
        }
        if self.max_train_per_class == Some(0) || self.max_eval_per_digit == Some(0) {
            return Err(Error::InvalidConfig("subset caps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma_mean: f64,
    pub sigma_std: f64,
    pub scale_min: u32,
    pub scale_max: u32,
    pub output_size: u32,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma_mean: 40.0,
            sigma_std: 30.0,
            scale_min: 28,
            scale_max: 84,
            output_size: 84,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0 < self.scale_min && self.scale_min <= self.scale_max && self.scale_max <= self.output_size) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < scale_min ({}) <= scale_max ({}) <= output_size ({})",
                self.scale_min, self.scale_max, self.output_size
            )));
        }
        if !self.sigma_mean.is_finite() || !(self.sigma_std >= 0.0 && self.sigma_std.is_finite()) {
            return Err(Error::InvalidConfig(
                "noise moments must be finite, sigma_std >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub sample_id: String,
    pub digit_label: u8,
    pub image: GrayImage,
}

impl ImageSample {
    /// Pixels rescaled to [0, 1], row-major.
    pub fn unit_pixels(&self) -> Vec<f32> {
        self.image.as_raw().iter().map(|&p| f32::from(p) / 255.0).collect()
    }

    /// `[1, 1, H, W]` model input.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (w, h) = self.image.dimensions();
        Tensor::from_vec(&[1, 1, h as usize, w as usize], self.unit_pixels()).expect("image dims")
    }
}

/// Stacks same-sized samples into a `[N, 1, H, W]` batch in [0, 1].
pub fn batch_tensor(samples: &[&ImageSample]) -> Result<Tensor<f32>> {
    let first = samples.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let (w, h) = first.image.dimensions();
    let mut data = Vec::with_capacity(samples.len() * (w * h) as usize);
    for s in samples {
        if s.image.dimensions() != (w, h) {
            return Err(Error::Shape(format!("{} has a different size", s.sample_id)));
        }
        data.extend(s.image.as_raw().iter().map(|&p| f32::from(p) / 255.0));
    }
    Tensor::from_vec(&[samples.len(), 1, h as usize, w as usize], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample {
    pub sample: ImageSample,
    pub role: ClassRole,
}

/// 𝕏 and 𝔸 for training, 𝕌 for evaluation, plus the generator settings
/// that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub spec: SplitSpec,
    pub noise: NoiseConfig,
    pub train_normal: Vec<ImageSample>,
    pub train_known_anomaly: Vec<ImageSample>,
    pub eval_all: Vec<EvalSample>,
}

impl DatasetSplit {
    pub fn eval_count(&self, role: ClassRole) -> usize {
        self.eval_all.iter().filter(|s| s.role == role).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Partition {
    Train = 1,
    Test = 2,
}

impl Partition {
    fn prefix(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Test => "test",
        }
    }
}

/// Independent RNG stream for one generated sample.
pub fn sample_rng(seed: u64, partition_tag: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((partition_tag << 32) | index as u64);
    rng
}

/// Adds i.i.d. N(0, σ²) noise to every cell, in row-major order.
pub fn add_gaussian_noise<R: Rng + ?Sized>(canvas: &mut [f64], sigma: f64, rng: &mut R) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("positive finite sigma");
    for v in canvas.iter_mut() {
        *v += normal.sample(rng);
    }
}

/// Builds one 84×84 noisy benchmark image from a clean 28×28 digit.
pub fn generate_noisy_sample<R: Rng + ?Sized>(
    clean: &GrayImage,
    config: &NoiseConfig,
    rng: &mut R,
) -> Result<GrayImage> {
    config.validate()?;
    if clean.dimensions() != (MNIST_SIDE, MNIST_SIDE) {
        return Err(Error::Shape(format!(
            "clean digit must be {MNIST_SIDE}x{MNIST_SIDE}, got {:?}",
            clean.dimensions()
        )));
    }
    let out = config.output_size as usize;
    let side = rng.random_range(config.scale_min..=config.scale_max) as usize;
    let source: Vec<f64> = clean.as_raw().iter().map(|&p| f64::from(p)).collect();
    let digit = resize_bilinear(&source, MNIST_SIDE as usize, MNIST_SIDE as usize, side, side);
    let top = rng.random_range(0..=out - side);
    let left = rng.random_range(0..=out - side);
    let mut canvas = vec![0.0; out * out];
    for (r, row) in digit.chunks_exact(side).enumerate() {
        let start = (top + r) * out + left;
        canvas[start..start + side].copy_from_slice(row);
    }
    let sigma = Normal::new(config.sigma_mean, config.sigma_std)
        .expect("validated noise moments")
        .sample(rng)
        .max(0.0);
    add_gaussian_noise(&mut canvas, sigma, rng);
    let pixels = canvas.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    Ok(GrayImage::from_raw(out as u32, out as u32, pixels).expect("square canvas"))
}

fn noisy_subset(
    source: &[CleanDigit],
    partition: Partition,
    keep: impl Fn(&CleanDigit) -> bool,
    cap_per_digit: Option<usize>,
    seed: u64,
    config: &NoiseConfig,
) -> Result<Vec<ImageSample>> {
    let mut taken = [0usize; 10];
    let picked: Vec<(usize, &CleanDigit)> = source
        .iter()
        .enumerate()
        .filter(|(_, d)| keep(d))
        .filter(|(_, d)| {
            let slot = &mut taken[d.label as usize];
            *slot += 1;
            cap_per_digit.is_none_or(|cap| *slot <= cap)
        })
        .collect();
    picked
        .into_par_iter()
        .map(|(index, digit)| {
            let mut rng = sample_rng(seed, partition as u64, index);
            Ok(ImageSample {
                sample_id: format!("{}-{index:05}", partition.prefix()),
                digit_label: digit.label,
                image: generate_noisy_sample(&digit.image, config, &mut rng)?,
            })
        })
        .collect()
}

/// Generates 𝕏, 𝔸 and 𝕌 from a clean labeled corpus.
pub fn build_splits(corpus: &MnistCorpus, spec: &SplitSpec, config: &NoiseConfig) -> Result<DatasetSplit> {
    spec.validate()?;
    config.validate()?;
    for digit in [spec.normal_digit, spec.known_anomaly_digit] {
        for (partition, name) in [(&corpus.train, "train"), (&corpus.test, "test")] {
            if MnistCorpus::count(partition, digit) == 0 {
                return Err(Error::MissingDigit { digit, partition: name });
            }
        }
    }
    let train_normal = noisy_subset(
        &corpus.train,
        Partition::Train,
        |d| d.label == spec.normal_digit,
        spec.max_train_per_class,
        spec.seed,
        config,
    )?;
    let train_known_anomaly = noisy_subset(
        &corpus.train,
        Partition::Train,
        |d| d.label == spec.known_anomaly_digit,
        spec.max_train_per_class,
        spec.seed,
        config,
    )?;
    let eval_all = noisy_subset(
        &corpus.test,
        Partition::Test,
        |_| true,
        spec.max_eval_per_digit,
        spec.seed,
        config,
    )?
    .into_iter()
    .map(|sample| EvalSample {
        role: ClassRole::of(sample.digit_label, spec),
        sample,
    })
    .collect();
    Ok(DatasetSplit {
        spec: spec.clone(),
        noise: config.clone(),
        train_normal,
        train_known_anomaly,
        eval_all,
    })
}
