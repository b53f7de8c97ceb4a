//! Per-sample anomaly scores (higher = more anomalous) for the weighted
//! detector and its three baselines, plus the threshold decision.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{batch_tensor, ClassRole, DatasetSplit, ImageSample};
use crate::error::{Error, IoContext, Result};
use crate::nn::layers::sigmoid_scalar;
use crate::nn::{Cnn, HeadKind, Tensor, Vae};
use crate::raster::Map2;
use crate::saliency::{combine_branches, image_dims, normalize, Activation, ClassActivation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Spade,
    NaiveSpade,
    Vae,
    Cnn,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Spade, Method::NaiveSpade, Method::Vae, Method::Cnn];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Spade => "spade",
            Method::NaiveSpade => "naive_spade",
            Method::Vae => "vae",
            Method::Cnn => "cnn",
        }
    }

    pub fn needs_vae(self) -> bool {
        self != Method::Cnn
    }

    pub fn needs_cnn(self) -> bool {
        self != Method::Vae
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::UnknownName {
                kind: "method",
                name: s.to_string(),
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub method: Method,
    pub role: ClassRole,
    pub digit_label: u8,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub threshold: f64,
    pub method: Method,
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.threshold.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "threshold {} is not finite",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    CorrectPattern,
    IncorrectPattern,
}

/// Strict comparison: a score equal to the threshold is a correct pattern.
pub fn classify(score: f64, config: &DetectorConfig) -> Decision {
    if score > config.threshold {
        Decision::IncorrectPattern
    } else {
        Decision::CorrectPattern
    }
}

/// |u − û| per pixel for single images `[1, 1, H, W]`.
pub fn error_map(u: &Tensor<f32>, u_hat: &Tensor<f32>) -> Result<Map2> {
    let (h, w) = image_dims(u)?;
    if u_hat.shape() != u.shape() {
        return Err(Error::Shape(format!(
            "reconstruction {:?} vs input {:?}",
            u_hat.shape(),
            u.shape()
        )));
    }
    let data = u
        .data()
        .iter()
        .zip(u_hat.data())
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs())
        .collect();
    Map2::new(h, w, data)
}

/// Σ e ⊙ (roi / Σ roi) for a non-negative, not yet normalized ROI.
pub fn weighted_error_score(error: &Map2, roi: &Map2) -> Result<f64> {
    error.dot(&normalize(roi)?.map)
}

fn reconstruct_one(vae: &Vae<f32>, u: &Tensor<f32>) -> Result<Tensor<f32>> {
    vae.reconstruct(u)
}

pub fn spade_score(vae: &Vae<f32>, cnn: &Cnn<f32>, u: &Tensor<f32>) -> Result<f64> {
    let u_hat = reconstruct_one(vae, u)?;
    Ok(scores_from_parts(Some(cnn), u, Some(&u_hat), &[Method::Spade])?[0])
}

pub fn naive_spade_score(vae: &Vae<f32>, cnn: &Cnn<f32>, u: &Tensor<f32>) -> Result<f64> {
    let u_hat = reconstruct_one(vae, u)?;
    Ok(scores_from_parts(Some(cnn), u, Some(&u_hat), &[Method::NaiveSpade])?[0])
}

pub fn vae_score(vae: &Vae<f32>, u: &Tensor<f32>) -> Result<f64> {
    let u_hat = reconstruct_one(vae, u)?;
    Ok(error_map(u, &u_hat)?.sum())
}

/// 1 − p(normal).
pub fn cnn_score(cnn: &Cnn<f32>, u: &Tensor<f32>) -> Result<f64> {
    Ok(scores_from_parts(Some(cnn), u, None, &[Method::Cnn])?[0])
}

fn anomaly_likelihood(cnn: &Cnn<f32>, u: &Tensor<f32>, y: f32) -> Result<f64> {
    let p_normal = match cnn.head_kind() {
        HeadKind::SingleLogit => f64::from(sigmoid_scalar(y)),
        HeadKind::TwoLogit => f64::from(cnn.normal_probabilities(u)?[0]),
    };
    Ok(1.0 - p_normal)
}

/// Scores one image for several methods, sharing the classifier pass over
/// `u` and the residual between methods.
pub fn scores_from_parts(
    cnn: Option<&Cnn<f32>>,
    u: &Tensor<f32>,
    u_hat: Option<&Tensor<f32>>,
    methods: &[Method],
) -> Result<Vec<f64>> {
    let (h, w) = image_dims(u)?;
    let error = u_hat.map(|r| error_map(u, r)).transpose()?;
    let input_pass = match cnn {
        Some(c) if methods.iter().any(|m| m.needs_cnn()) => Some(ClassActivation::of(c, u)?),
        _ => None,
    };
    methods
        .iter()
        .map(|&m| {
            if m.needs_vae() && error.is_none() {
                return Err(Error::MissingModel {
                    method: m.as_str(),
                    model: "vae",
                });
            }
            if m.needs_cnn() && input_pass.is_none() {
                return Err(Error::MissingModel {
                    method: m.as_str(),
                    model: "cnn",
                });
            }
            match m {
                Method::Vae => Ok(error.as_ref().unwrap().sum()),
                Method::Cnn => anomaly_likelihood(cnn.unwrap(), u, input_pass.as_ref().unwrap().score),
                Method::NaiveSpade => {
                    let roi = input_pass.as_ref().unwrap().roi(Activation::Relu)?.resized(h, w);
                    error.as_ref().unwrap().dot(&roi)
                }
                Method::Spade => {
                    let recon_pass = ClassActivation::of(cnn.unwrap(), u_hat.unwrap())?;
                    let roi = combine_branches(
                        &input_pass.as_ref().unwrap().roi(Activation::Abs)?,
                        &recon_pass.roi(Activation::Relu)?,
                        h,
                        w,
                    )?;
                    error.as_ref().unwrap().dot(&roi.map)
                }
            }
        })
        .collect()
}

/// Trained models available for scoring.
#[derive(Clone, Copy, Debug, Default)]
pub struct Models<'a> {
    pub vae: Option<&'a Vae<f32>>,
    pub cnn: Option<&'a Cnn<f32>>,
}

impl Models<'_> {
    fn check(&self, methods: &[Method]) -> Result<()> {
        for &m in methods {
            if m.needs_vae() && self.vae.is_none() {
                return Err(Error::MissingModel {
                    method: m.as_str(),
                    model: "vae",
                });
            }
            if m.needs_cnn() && self.cnn.is_none() {
                return Err(Error::MissingModel {
                    method: m.as_str(),
                    model: "cnn",
                });
            }
        }
        Ok(())
    }
}

const RECON_CHUNK: usize = 32;

/// Posterior-mean reconstructions, one `[1, 1, H, W]` tensor per sample.
pub fn reconstruct_samples(vae: &Vae<f32>, samples: &[&ImageSample]) -> Result<Vec<Tensor<f32>>> {
    let chunks: Vec<Vec<Tensor<f32>>> = samples
        .par_chunks(RECON_CHUNK)
        .map(|chunk| {
            let recon = vae.reconstruct(&batch_tensor(chunk)?)?;
            let &[n, c, h, w] = recon.shape() else { unreachable!() };
            (0..n)
                .map(|i| Tensor::from_vec(&[1, c, h, w], recon.item(i).to_vec()))
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Scores `samples` (with their roles) for every method in `methods`.
/// `reconstructions`, when given, must align with `samples` and replaces the
/// VAE pass. Records are ordered by sample id, then by method.
pub fn score_samples(
    models: &Models<'_>,
    samples: &[(&ImageSample, ClassRole)],
    methods: &[Method],
    reconstructions: Option<&[Tensor<f32>]>,
) -> Result<Vec<ScoreRecord>> {
    models.check(methods)?;
    let computed;
    let recons: Option<&[Tensor<f32>]> = match (reconstructions, models.vae) {
        (Some(r), _) => {
            if r.len() != samples.len() {
                return Err(Error::Shape(format!(
                    "{} reconstructions for {} samples",
                    r.len(),
                    samples.len()
                )));
            }
            Some(r)
        }
        (None, Some(vae)) if methods.iter().any(|m| m.needs_vae()) => {
            let plain: Vec<&ImageSample> = samples.iter().map(|(s, _)| *s).collect();
            computed = reconstruct_samples(vae, &plain)?;
            Some(&computed)
        }
        _ => None,
    };
    let mut records: Vec<ScoreRecord> = samples
        .par_iter()
        .enumerate()
        .map(|(i, (sample, role))| {
            let u = sample.to_tensor();
            let scores = scores_from_parts(models.cnn, &u, recons.map(|r| &r[i]), methods)?;
            methods
                .iter()
                .zip(scores)
                .map(|(&method, score)| {
                    if !score.is_finite() {
                        return Err(Error::NonFiniteScore {
                            method: method.as_str(),
                            sample_id: sample.sample_id.clone(),
                        });
                    }
                    Ok(ScoreRecord {
                        sample_id: sample.sample_id.clone(),
                        method,
                        role: *role,
                        digit_label: sample.digit_label,
                        score,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    records.sort_by(|a, b| a.sample_id.cmp(&b.sample_id).then(a.method.cmp(&b.method)));
    Ok(records)
}

/// One record per evaluation sample.
pub fn score_corpus(models: &Models<'_>, split: &DatasetSplit, method: Method) -> Result<Vec<ScoreRecord>> {
    let samples: Vec<_> = split.eval_all.iter().map(|e| (&e.sample, e.role)).collect();
    score_samples(models, &samples, &[method], None)
}

/// Scores the training classes 𝕏 and 𝔸, e.g. to pick a threshold without
/// touching evaluation data.
pub fn score_training(models: &Models<'_>, split: &DatasetSplit, method: Method) -> Result<Vec<ScoreRecord>> {
    let samples: Vec<_> = split
        .train_normal
        .iter()
        .map(|s| (s, ClassRole::Normal))
        .chain(split.train_known_anomaly.iter().map(|s| (s, ClassRole::KnownAnomaly)))
        .collect();
    score_samples(models, &samples, &[method], None)
}

/// Threshold maximizing TPR − FPR under the strict `score > threshold`
/// rule. Intended for 𝕏 ∪ 𝔸 scores only.
pub fn youden_threshold(scores: &[f64], is_anomaly: &[bool]) -> Result<f64> {
    if scores.len() != is_anomaly.len() {
        return Err(Error::Shape(format!(
            "{} scores, {} labels",
            scores.len(),
            is_anomaly.len()
        )));
    }
    let positives = is_anomaly.iter().filter(|&&a| a).count();
    let negatives = is_anomaly.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // Walking thresholds downward: everything above the current value is
    // flagged. Start with nothing flagged (threshold = the maximum).
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = (0.0, scores[order[0]]);
    let mut i = 0;
    while i < order.len() {
        let value = scores[order[i]];
        while i < order.len() && scores[order[i]] == value {
            if is_anomaly[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let threshold = if i < order.len() {
            scores[order[i]]
        } else {
            f64::NEG_INFINITY
        };
        let j = tp as f64 / positives as f64 - fp as f64 / negatives as f64;
        if j > best.0 {
            best = (j, threshold);
        }
    }
    Ok(best.1)
}

#[derive(Serialize)]
struct CsvRow<'a> {
    sample_id: &'a str,
    method: &'static str,
    role: &'static str,
    digit_label: u8,
    score: f64,
}

pub fn write_scores_csv(records: &[ScoreRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(CsvRow {
            sample_id: &r.sample_id,
            method: r.method.as_str(),
            role: r.role.as_str(),
            digit_label: r.digit_label,
            score: r.score,
        })?;
    }
    w.flush().at(path)?;
    Ok(())
}

/// JSON document holding the records and caller-supplied provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreFile {
    pub schema_version: u64,
    pub config: serde_json::Value,
    pub records: Vec<ScoreRecord>,
}

pub const SCORES_SCHEMA_VERSION: u64 = 1;

pub fn write_scores_json(records: &[ScoreRecord], config: serde_json::Value, path: &Path) -> Result<()> {
    let doc = ScoreFile {
        schema_version: SCORES_SCHEMA_VERSION,
        config,
        records: records.to_vec(),
    };
    fs::write(path, serde_json::to_string_pretty(&doc)?).at(path)?;
    Ok(())
}

pub fn read_scores_json(path: &Path) -> Result<ScoreFile> {
    let text = fs::read_to_string(path).at(path)?;
    let doc: ScoreFile = serde_json::from_str(&text)?;
    if doc.schema_version != SCORES_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: doc.schema_version,
            expected: SCORES_SCHEMA_VERSION,
        });
    }
    Ok(doc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(data: Vec<f32>, h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_vec(&[1, 1, h, w], data).unwrap()
    }

    #[test]
    fn hand_example_weighted_error() {
        let e = Map2::from_rows(&[&[4.0, 0.0], &[0.0, 0.0]]).unwrap();
        let roi = Map2::from_rows(&[&[1.0, 3.0], &[0.0, 0.0]]).unwrap();
        assert_eq!(weighted_error_score(&e, &roi).unwrap(), 1.0);
    }

    #[test]
    fn perfect_reconstruction_scores_zero() {
        let u = image(vec![0.1, 0.5, 0.9, 0.3], 2, 2);
        let e = error_map(&u, &u).unwrap();
        assert_eq!(e.sum(), 0.0);
        let roi = Map2::from_rows(&[&[1.0, 3.0], &[2.0, 0.0]]).unwrap();
        assert_eq!(weighted_error_score(&e, &roi).unwrap(), 0.0);
    }

    #[test]
    fn uniform_roi_is_mean_error() {
        let e = Map2::from_rows(&[&[4.0, 1.0], &[2.0, 1.0]]).unwrap();
        let roi = Map2::from_rows(&[&[0.7, 0.7], &[0.7, 0.7]]).unwrap();
        assert!((weighted_error_score(&e, &roi).unwrap() - 8.0 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn naive_weighting_is_linear_in_roi() {
        let e = Map2::from_rows(&[&[4.0, 1.0], &[2.0, 1.0]]).unwrap();
        let roi = Map2::from_rows(&[&[0.0, 3.0], &[1.0, 0.5]]).unwrap();
        assert_eq!(e.dot(&roi.scaled(2.0)).unwrap(), 2.0 * e.dot(&roi).unwrap());
        assert_eq!(e.dot(&Map2::zeros(2, 2)).unwrap(), 0.0);
    }

    #[test]
    fn classify_uses_strict_inequality() {
        let cfg = DetectorConfig {
            threshold: 1.5,
            method: Method::Spade,
        };
        assert_eq!(classify(1.5, &cfg), Decision::CorrectPattern);
        assert_eq!(classify(1.5 + 1e-12, &cfg), Decision::IncorrectPattern);
        let never = DetectorConfig {
            threshold: f64::INFINITY,
            ..cfg
        };
        assert_eq!(classify(f64::MAX, &never), Decision::CorrectPattern);
        assert!(DetectorConfig {
            threshold: f64::NAN,
            ..cfg
        }
        .validate()
        .is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("gradcam".parse::<Method>().is_err());
    }

    #[test]
    fn youden_picks_separating_threshold() {
        let scores = [0.1, 0.2, 0.3, 0.7, 0.8, 0.9];
        let labels = [false, false, false, true, true, true];
        let t = youden_threshold(&scores, &labels).unwrap();
        assert_eq!(t, 0.3);
        let cfg = DetectorConfig {
            threshold: t,
            method: Method::Vae,
        };
        for (s, l) in scores.iter().zip(labels) {
            assert_eq!(classify(*s, &cfg) == Decision::IncorrectPattern, l);
        }
        assert!(youden_threshold(&[1.0], &[true]).is_err());
    }

    #[test]
    fn missing_models_are_reported() {
        let models = Models::default();
        assert!(matches!(
            models.check(&[Method::Spade]),
            Err(Error::MissingModel { .. })
        ));
        let u = image(vec![0.0; 4], 2, 2);
        assert!(matches!(
            scores_from_parts(None, &u, Some(&u), &[Method::Cnn]),
            Err(Error::MissingModel { model: "cnn", .. })
        ));
        assert_eq!(
            scores_from_parts(None, &u, Some(&u), &[Method::Vae]).unwrap(),
            vec![0.0]
        );
    }
}
