//! PNG + JSON manifest persistence for generated splits.
//!
//! Layout: `<dir>/manifest.json` and one 8-bit grayscale PNG per sample
//! under `<dir>/images/`. The manifest carries separate digests for the
//! training and evaluation halves so a training run can verify what it reads
//! without ever opening an evaluation image.

use std::fs;
use std::path::Path;

use image::GrayImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ClassRole, DatasetSplit, EvalSample, ImageSample, NoiseConfig, SplitSpec};
use crate::error::{Error, IoContext, Result};

pub const CORPUS_SCHEMA_VERSION: u64 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPart {
    TrainNormal,
    TrainKnownAnomaly,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub digit_label: u8,
    pub role: ClassRole,
    pub split: SplitPart,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorEcho {
    pub split: SplitSpec,
    pub noise: NoiseConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema_version: u64,
    pub generator: GeneratorEcho,
    /// SHA-256 over the training entries and their pixels.
    pub train_checksum: String,
    /// SHA-256 over the evaluation entries and their pixels.
    pub eval_checksum: String,
    /// SHA-256 of the two digests above; identifies the whole corpus.
    pub checksum: String,
    pub samples: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).at(&path)?;
        let raw: serde_json::Value = serde_json::from_str(&text)?;
        let version = raw
            .get("schema_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Corpus("manifest lacks schema_version".into()))?;
        if version != CORPUS_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: version,
                expected: CORPUS_SCHEMA_VERSION,
            });
        }
        Ok(serde_json::from_value(raw)?)
    }

    pub fn count(&self, part: SplitPart) -> usize {
        self.samples.iter().filter(|e| e.split == part).count()
    }
}

fn hash_entry(hasher: &mut Sha256, entry: &ManifestEntry, image: &GrayImage) {
    hasher.update(entry.sample_id.as_bytes());
    hasher.update([0, entry.digit_label, entry.role as u8, entry.split as u8]);
    hasher.update(image.width().to_le_bytes());
    hasher.update(image.height().to_le_bytes());
    hasher.update(image.as_raw());
}

fn combine(train: &str, eval: &str) -> String {
    hex::encode(Sha256::new().chain_update(train).chain_update(eval).finalize())
}

fn entries(split: &DatasetSplit) -> Vec<(ManifestEntry, &GrayImage)> {
    let make = |s: &ImageSample, role, part| ManifestEntry {
        sample_id: s.sample_id.clone(),
        digit_label: s.digit_label,
        role,
        split: part,
        path: format!("images/{}.png", s.sample_id),
    };
    let mut out = Vec::new();
    for s in &split.train_normal {
        out.push((make(s, ClassRole::Normal, SplitPart::TrainNormal), &s.image));
    }
    for s in &split.train_known_anomaly {
        out.push((make(s, ClassRole::KnownAnomaly, SplitPart::TrainKnownAnomaly), &s.image));
    }
    for e in &split.eval_all {
        out.push((make(&e.sample, e.role, SplitPart::Eval), &e.sample.image));
    }
    out
}

/// Writes the split and returns its manifest.
pub fn save_corpus(split: &DatasetSplit, dir: &Path) -> Result<CorpusManifest> {
    let images = dir.join("images");
    fs::create_dir_all(&images).at(&images)?;
    let mut train = Sha256::new();
    let mut eval = Sha256::new();
    let mut samples = Vec::new();
    for (entry, image) in entries(split) {
        let hasher = if entry.split == SplitPart::Eval {
            &mut eval
        } else {
            &mut train
        };
        hash_entry(hasher, &entry, image);
        image.save(dir.join(&entry.path))?;
        samples.push(entry);
    }
    let train_checksum = hex::encode(train.finalize());
    let eval_checksum = hex::encode(eval.finalize());
    let manifest = CorpusManifest {
        schema_version: CORPUS_SCHEMA_VERSION,
        generator: GeneratorEcho {
            split: split.spec.clone(),
            noise: split.noise.clone(),
        },
        checksum: combine(&train_checksum, &eval_checksum),
        train_checksum,
        eval_checksum,
        samples,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).at(&path)?;
    Ok(manifest)
}

fn read_image(dir: &Path, entry: &ManifestEntry) -> Result<GrayImage> {
    let path = dir.join(&entry.path);
    let bytes = fs::read(&path).at(&path)?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)?;
    match decoded {
        image::DynamicImage::ImageLuma8(img) => Ok(img),
        other => Err(Error::Corpus(format!(
            "{} is {:?}, expected 8-bit grayscale",
            entry.path,
            other.color()
        ))),
    }
}

fn load_parts(dir: &Path, with_eval: bool) -> Result<(CorpusManifest, DatasetSplit)> {
    let manifest = CorpusManifest::read(dir)?;
    if manifest.checksum != combine(&manifest.train_checksum, &manifest.eval_checksum) {
        return Err(Error::Checksum {
            expected: manifest.checksum.clone(),
            actual: combine(&manifest.train_checksum, &manifest.eval_checksum),
        });
    }
    let mut split = DatasetSplit {
        spec: manifest.generator.split.clone(),
        noise: manifest.generator.noise.clone(),
        train_normal: Vec::new(),
        train_known_anomaly: Vec::new(),
        eval_all: Vec::new(),
    };
    let mut train = Sha256::new();
    let mut eval = Sha256::new();
    for entry in &manifest.samples {
        if entry.split == SplitPart::Eval && !with_eval {
            continue;
        }
        let image = read_image(dir, entry)?;
        let hasher = if entry.split == SplitPart::Eval {
            &mut eval
        } else {
            &mut train
        };
        hash_entry(hasher, entry, &image);
        let sample = ImageSample {
            sample_id: entry.sample_id.clone(),
            digit_label: entry.digit_label,
            image,
        };
        match entry.split {
            SplitPart::TrainNormal => split.train_normal.push(sample),
            SplitPart::TrainKnownAnomaly => split.train_known_anomaly.push(sample),
            SplitPart::Eval => split.eval_all.push(EvalSample {
                sample,
                role: entry.role,
            }),
        }
    }
    let verify = |declared: &str, hasher: Sha256| {
        let actual = hex::encode(hasher.finalize());
        if actual == declared {
            Ok(())
        } else {
            Err(Error::Checksum {
                expected: declared.to_string(),
                actual,
            })
        }
    };
    verify(&manifest.train_checksum, train)?;
    if with_eval {
        verify(&manifest.eval_checksum, eval)?;
    }
    Ok((manifest, split))
}

/// Loads and verifies a full corpus.
pub fn load_corpus(dir: &Path) -> Result<DatasetSplit> {
    load_parts(dir, true).map(|(_, split)| split)
}

/// Loads only 𝕏 and 𝔸; evaluation images are never opened. `eval_all`
/// of the result is empty.
pub fn load_training_corpus(dir: &Path) -> Result<(CorpusManifest, DatasetSplit)> {
    load_parts(dir, false)
}
