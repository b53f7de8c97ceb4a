//! Gradient-weighted class-activation regions of interest.
//!
//! Channel weights α are the spatial means of ∂y^c/∂A over the classifier's
//! last feature stack. The detector's ROI adds an absolute-value branch on
//! the input image to a rectified branch on its reconstruction, upsamples
//! the sum to image resolution and divides by its L1 mass.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::nn::{Cnn, FeatureStack, Scalar, Tensor};
use crate::raster::Map2;

/// Anything that maps a feature stack to a class score and can
/// differentiate that score with respect to the stack.
pub trait ScoreHead<T: Scalar> {
    fn score(&self, features: &FeatureStack<T>) -> Result<T>;
    fn score_gradient(&self, features: &FeatureStack<T>) -> Result<FeatureStack<T>>;
}

impl<T: Scalar> ScoreHead<T> for Cnn<T> {
    fn score(&self, features: &FeatureStack<T>) -> Result<T> {
        self.head_score(features)
    }

    fn score_gradient(&self, features: &FeatureStack<T>) -> Result<FeatureStack<T>> {
        self.head_score_gradient(features)
    }
}

/// One importance weight per feature channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaWeights {
    pub alpha: Vec<f64>,
}

impl AlphaWeights {
    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Abs,
    Relu,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Abs => v.abs(),
            Activation::Relu => v.max(0.0),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "abs" => Ok(Activation::Abs),
            "relu" => Ok(Activation::Relu),
            _ => Err(Error::UnknownName {
                kind: "activation",
                name: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Abs => "abs",
            Activation::Relu => "relu",
        })
    }
}

/// Image-resolution weighting with its pre-normalization L1 mass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub map: Map2,
    pub l1_mass: f64,
    /// Set when the combined map was identically zero and the uniform
    /// weighting was substituted.
    pub uniform_fallback: bool,
}

/// α from an already computed feature stack.
pub fn alpha_for_head<T: Scalar, H: ScoreHead<T> + ?Sized>(
    head: &H,
    features: &FeatureStack<T>,
) -> Result<AlphaWeights> {
    let grad = head.score_gradient(features)?;
    let z = features.spatial_size() as f64;
    let alpha = (0..grad.channels())
        .map(|k| grad.channel(k).iter().map(|g| g.to_f64_lossy()).sum::<f64>() / z)
        .collect();
    Ok(AlphaWeights { alpha })
}

/// α for the normal-class score of image `x` (`[1, 1, H, W]`).
pub fn compute_alpha<T: Scalar>(model: &Cnn<T>, x: &Tensor<T>) -> Result<AlphaWeights> {
    let (_, features) = model.forward_with_features(x)?;
    alpha_for_head(model, &features)
}

/// f(Σ_k α_k A^k) at feature resolution.
pub fn roi_map<T: Scalar>(alpha: &AlphaWeights, features: &FeatureStack<T>, activation: Activation) -> Result<Map2> {
    if alpha.len() != features.channels() {
        return Err(Error::Shape(format!(
            "{} weights for {} feature channels",
            alpha.len(),
            features.channels()
        )));
    }
    let mut acc = vec![0.0; features.spatial_size()];
    for (k, &a) in alpha.alpha.iter().enumerate() {
        for (s, &v) in acc.iter_mut().zip(features.channel(k)) {
            *s += a * v.to_f64_lossy();
        }
    }
    let data = acc.into_iter().map(|v| activation.apply(v)).collect();
    Map2::new(features.height(), features.width(), data)
}

/// One classifier pass over an image: y^c, the last feature stack and α.
#[derive(Clone, Debug)]
pub struct ClassActivation<T> {
    pub score: T,
    pub features: FeatureStack<T>,
    pub alpha: AlphaWeights,
}

impl<T: Scalar> ClassActivation<T> {
    pub fn of(model: &Cnn<T>, x: &Tensor<T>) -> Result<Self> {
        let (score, features) = model.forward_with_features(x)?;
        let alpha = alpha_for_head(model, &features)?;
        Ok(Self { score, features, alpha })
    }

    pub fn roi(&self, activation: Activation) -> Result<Map2> {
        roi_map(&self.alpha, &self.features, activation)
    }
}

fn branch<T: Scalar>(model: &Cnn<T>, x: &Tensor<T>, activation: Activation) -> Result<Map2> {
    ClassActivation::of(model, x)?.roi(activation)
}

pub(crate) fn image_dims<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize)> {
    match x.shape() {
        &[1, 1, h, w] => Ok((h, w)),
        other => Err(Error::Shape(format!("expected one [1, 1, H, W] image, got {other:?}"))),
    }
}

/// Sums two feature-resolution branch maps, upsamples once and divides by
/// the L1 mass. An all-zero sum yields the uniform map.
pub fn combine_branches(input_branch: &Map2, recon_branch: &Map2, height: usize, width: usize) -> Result<SaliencyMap> {
    normalize(&input_branch.add(recon_branch)?.resized(height, width))
}

/// Divides a non-negative map by its sum.
pub fn normalize(map: &Map2) -> Result<SaliencyMap> {
    if let Some(bad) = map.data.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Shape(format!(
            "saliency entries must be finite and non-negative, found {bad}"
        )));
    }
    let mass = map.sum();
    if mass > 0.0 {
        return Ok(SaliencyMap {
            map: map.map(|v| v / mass),
            l1_mass: mass,
            uniform_fallback: false,
        });
    }
    log::warn!("region-of-interest map is identically zero; using uniform weights");
    let n = map.len() as f64;
    Ok(SaliencyMap {
        map: map.map(|_| 1.0 / n),
        l1_mass: 0.0,
        uniform_fallback: true,
    })
}

/// Abs branch on `u` plus ReLU branch on its reconstruction `u_hat`, each
/// with its own α.
pub fn spade_roi<T: Scalar>(model: &Cnn<T>, u: &Tensor<T>, u_hat: &Tensor<T>) -> Result<SaliencyMap> {
    let (h, w) = image_dims(u)?;
    if image_dims(u_hat)? != (h, w) {
        return Err(Error::Shape(format!(
            "reconstruction {:?} differs from input {:?}",
            u_hat.shape(),
            u.shape()
        )));
    }
    let input_branch = branch(model, u, Activation::Abs)?;
    let recon_branch = branch(model, u_hat, Activation::Relu)?;
    combine_branches(&input_branch, &recon_branch, h, w)
}

/// Input-only ReLU map, upsampled, not normalized.
pub fn naive_roi<T: Scalar>(model: &Cnn<T>, u: &Tensor<T>) -> Result<Map2> {
    let (h, w) = image_dims(u)?;
    Ok(branch(model, u, Activation::Relu)?.resized(h, w))
}

/// 256-entry black-red-yellow-white ramp; entry 0 is black.
pub fn heat_lut() -> [[u8; 3]; 256] {
    let mut lut = [[0u8; 3]; 256];
    for (i, rgb) in lut.iter_mut().enumerate() {
        let t = i as u32 * 3;
        for (c, out) in rgb.iter_mut().enumerate() {
            let v = t.saturating_sub(255 * c as u32).min(255);
            *out = v as u8;
        }
    }
    lut
}

/// Blends the grayscale image `u` (values in [0, 1]) half and half with the
/// colour-mapped saliency scaled to its own maximum.
pub fn overlay_image(u: &Map2, saliency: &SaliencyMap) -> Result<RgbImage> {
    let l = &saliency.map;
    if (u.height, u.width) != (l.height, l.width) {
        return Err(Error::Shape(format!(
            "image {}x{} vs saliency {}x{}",
            u.height, u.width, l.height, l.width
        )));
    }
    let lut = heat_lut();
    let peak = l.data.iter().copied().fold(0.0, f64::max);
    let mut out = RgbImage::new(u.width as u32, u.height as u32);
    for (i, px) in out.pixels_mut().enumerate() {
        let gray = (u.data[i].clamp(0.0, 1.0) * 255.0).round();
        let level = if peak > 0.0 {
            (l.data[i] / peak * 255.0).round() as usize
        } else {
            0
        };
        let colour = lut[level.min(255)];
        *px = Rgb(colour.map(|c| ((gray + f64::from(c)) * 0.5).round() as u8));
    }
    Ok(out)
}

/// Writes [`overlay_image`] as a PNG.
pub fn render_overlay(u: &Map2, saliency: &SaliencyMap, path: &Path) -> Result<()> {
    let img = overlay_image(u, saliency)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).at(parent)?;
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
