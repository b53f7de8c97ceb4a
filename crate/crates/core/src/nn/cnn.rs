//! Binary normal-vs-known-anomaly classifier whose last convolutional
//! feature maps feed the Grad-CAM weighting.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{conv_out_size, relu, relu_backward, sigmoid_scalar, Conv2d, Linear};
use super::model::Model;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

const STRIDE: usize = 2;
const PADDING: usize = 1;

/// Output head. `SingleLogit` emits one pre-activation score squashed by the
/// logistic function; `TwoLogit` emits a (normal, anomaly) logit pair read
/// through a softmax. In both cases the class score y^c is the normal-class
/// logit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    SingleLogit,
    TwoLogit,
}

impl HeadKind {
    fn outputs(self) -> usize {
        match self {
            HeadKind::SingleLogit => 1,
            HeadKind::TwoLogit => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnArch {
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    #[serde(default)]
    pub head: HeadKind,
}

impl Default for CnnArch {
    fn default() -> Self {
        Self {
            input_size: 84,
            channels: vec![32, 64, 128],
            kernel: 3,
            head: HeadKind::SingleLogit,
        }
    }
}

impl CnnArch {
    /// Side length of the last feature map.
    pub fn feature_size(&self) -> usize {
        self.channels
            .iter()
            .fold(self.input_size, |s, _| conv_out_size(s, self.kernel, STRIDE, PADDING))
    }

    pub fn feature_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.kernel == 0 {
            return Err(Error::InvalidConfig(format!("degenerate CNN architecture {self:?}")));
        }
        let mut size = self.input_size;
        for _ in &self.channels {
            if size + 2 * PADDING < self.kernel {
                return Err(Error::InvalidConfig(format!(
                    "input {} too small for {} stride-2 layers",
                    self.input_size,
                    self.channels.len()
                )));
            }
            size = conv_out_size(size, self.kernel, STRIDE, PADDING);
        }
        Ok(())
    }
}

/// Last-layer activations A of one image: `k` channels of `h × w` maps.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack<T> {
    tensor: Tensor<T>,
}

impl<T: Scalar> FeatureStack<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape("feature stack needs k, h, w > 0".into()));
        }
        Ok(Self {
            tensor: Tensor::from_vec(&[channels, height, width], data)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    /// Z, the number of spatial positions pooled over.
    pub fn spatial_size(&self) -> usize {
        self.height() * self.width()
    }

    pub fn channel(&self, k: usize) -> &[T] {
        let z = self.spatial_size();
        &self.tensor.data()[k * z..(k + 1) * z]
    }

    pub fn data(&self) -> &[T] {
        self.tensor.data()
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        self.tensor.data_mut()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cnn<T> {
    arch: CnnArch,
    convs: Vec<Conv2d<T>>,
    fc: Linear<T>,
}

struct CnnTrace<T> {
    /// Post-ReLU output of every convolution; the last one is A.
    acts: Vec<Tensor<T>>,
    pooled: Tensor<T>,
    logits: Tensor<T>,
}

/// Squared-error classification objective: mean over the batch of
/// (t − f)², with f the probability of the normal class.
pub fn squared_error_objective(probabilities: &[f64], labels: &[f64]) -> Result<f64> {
    validate_labels(labels)?;
    if probabilities.len() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "{} outputs for {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    Ok(probabilities
        .iter()
        .zip(labels)
        .map(|(f, t)| (t - f) * (t - f))
        .sum::<f64>()
        / labels.len() as f64)
}

fn validate_labels(labels: &[f64]) -> Result<()> {
    match labels.iter().find(|&&t| t != 0.0 && t != 1.0) {
        Some(bad) => Err(Error::InvalidLabel(bad.to_string())),
        None => Ok(()),
    }
}

impl<T: Scalar> Cnn<T> {
    pub fn head_kind(&self) -> HeadKind {
        self.arch.head
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = self.arch.input_size;
        match x.shape() {
            [_, 1, h, w] if *h == s && *w == s => Ok(()),
            other => Err(Error::Shape(format!("CNN expects [N, 1, {s}, {s}], got {other:?}"))),
        }
    }

    fn trace(&self, x: &Tensor<T>) -> CnnTrace<T> {
        let mut acts: Vec<Tensor<T>> = Vec::with_capacity(self.convs.len());
        for layer in &self.convs {
            let input = acts.last().unwrap_or(x);
            acts.push(relu(&layer.forward(input)));
        }
        let a = acts.last().unwrap();
        let (n, k) = (a.batch(), a.shape()[1]);
        let z = a.item_len() / k;
        let inv_z = T::one() / T::from_usize(z).unwrap();
        let mut pooled = Tensor::zeros(&[n, k]);
        for i in 0..n {
            let item = a.item(i);
            for (c, p) in pooled.item_mut(i).iter_mut().enumerate() {
                *p = item[c * z..(c + 1) * z].iter().copied().sum::<T>() * inv_z;
            }
        }
        let logits = self.fc.forward(&pooled);
        CnnTrace { acts, pooled, logits }
    }

    fn normal_probability_of(&self, logits: &[T]) -> T {
        match self.arch.head {
            HeadKind::SingleLogit => sigmoid_scalar(logits[0]),
            HeadKind::TwoLogit => sigmoid_scalar(logits[0] - logits[1]),
        }
    }

    /// Raw head outputs, `[N, 1]` or `[N, 2]`.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        Ok(self.trace(x).logits)
    }

    /// Pre-squashing normal-class score y^c per sample.
    pub fn scores(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let logits = self.logits(x)?;
        Ok((0..logits.batch()).map(|i| logits.item(i)[0]).collect())
    }

    /// Probability of the normal class per sample.
    pub fn normal_probabilities(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let logits = self.logits(x)?;
        Ok((0..logits.batch())
            .map(|i| self.normal_probability_of(logits.item(i)))
            .collect())
    }

    /// y^c together with the last convolutional layer's post-activation maps
    /// for a single image `[1, 1, H, W]`.
    pub fn forward_with_features(&self, x: &Tensor<T>) -> Result<(T, FeatureStack<T>)> {
        self.check_input(x)?;
        if x.batch() != 1 {
            return Err(Error::Shape(format!(
                "expected one image, got a batch of {}",
                x.batch()
            )));
        }
        let mut t = self.trace(x);
        let a = t.acts.pop().unwrap();
        let &[_, k, h, w] = a.shape() else { unreachable!() };
        let features = FeatureStack::new(k, h, w, a.into_data())?;
        Ok((t.logits.item(0)[0], features))
    }

    fn check_features(&self, features: &FeatureStack<T>) -> Result<()> {
        let (k, s) = (self.arch.feature_channels(), self.arch.feature_size());
        if features.channels() != k || features.height() != s || features.width() != s {
            return Err(Error::Shape(format!(
                "head expects {k}x{s}x{s} features, got {}x{}x{}",
                features.channels(),
                features.height(),
                features.width()
            )));
        }
        Ok(())
    }

    fn pool(features: &FeatureStack<T>) -> Tensor<T> {
        let k = features.channels();
        let inv_z = T::one() / T::from_usize(features.spatial_size()).unwrap();
        let pooled = (0..k)
            .map(|c| features.channel(c).iter().copied().sum::<T>() * inv_z)
            .collect();
        Tensor::from_vec(&[1, k], pooled).expect("pooled shape")
    }

    /// The head (global average pooling + linear) applied to a feature stack;
    /// returns y^c.
    pub fn head_score(&self, features: &FeatureStack<T>) -> Result<T> {
        self.check_features(features)?;
        Ok(self.fc.forward(&Self::pool(features)).data()[0])
    }

    /// ∂y^c/∂A by reverse-mode differentiation through the head.
    pub fn head_score_gradient(&self, features: &FeatureStack<T>) -> Result<FeatureStack<T>> {
        self.check_features(features)?;
        let pooled = Self::pool(features);
        let mut d_logits = Tensor::zeros(&[1, self.fc.outputs()]);
        d_logits.data_mut()[0] = T::one();
        let mut sink = self.fc.zeros_like();
        let d_pooled = self.fc.backward(&pooled, &d_logits, &mut sink);
        let z = features.spatial_size();
        let inv_z = T::one() / T::from_usize(z).unwrap();
        let data = d_pooled
            .data()
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g * inv_z, z))
            .collect();
        FeatureStack::new(features.channels(), features.height(), features.width(), data)
    }

    pub fn loss(&self, x: &Tensor<T>, labels: &[f64]) -> Result<f64> {
        let probs: Vec<f64> = self
            .normal_probabilities(x)?
            .into_iter()
            .map(Scalar::to_f64_lossy)
            .collect();
        squared_error_objective(&probs, labels)
    }

    pub fn loss_and_grad(&self, x: &Tensor<T>, labels: &[f64]) -> Result<(f64, Self)> {
        self.check_input(x)?;
        validate_labels(labels)?;
        if labels.len() != x.batch() {
            return Err(Error::Shape(format!(
                "{} labels for batch of {}",
                labels.len(),
                x.batch()
            )));
        }
        let t = self.trace(x);
        let n = x.batch();
        let probs: Vec<T> = (0..n).map(|i| self.normal_probability_of(t.logits.item(i))).collect();
        let probs64: Vec<f64> = probs.iter().map(|p| p.to_f64_lossy()).collect();
        let loss = squared_error_objective(&probs64, labels)?;

        let two_over_n = T::from_f64_lossy(2.0 / n as f64);
        let mut d_logits = Tensor::zeros(t.logits.shape());
        for i in 0..n {
            let f = probs[i];
            let g = two_over_n * (f - T::from_f64_lossy(labels[i])) * f * (T::one() - f);
            let row = d_logits.item_mut(i);
            row[0] = g;
            if self.arch.head == HeadKind::TwoLogit {
                row[1] = -g;
            }
        }
        let mut grad = self.zeros_like();
        let d_pooled = self.fc.backward(&t.pooled, &d_logits, &mut grad.fc);
        let a = t.acts.last().unwrap();
        let k = a.shape()[1];
        let z = a.item_len() / k;
        let inv_z = T::one() / T::from_usize(z).unwrap();
        let mut d_a = Tensor::zeros(a.shape());
        for i in 0..n {
            let dp = d_pooled.item(i).to_vec();
            for (c, chunk) in d_a.item_mut(i).chunks_mut(z).enumerate() {
                chunk.fill(dp[c] * inv_z);
            }
        }
        let mut d = relu_backward(a, &d_a);
        for i in (0..self.convs.len()).rev() {
            let input = if i == 0 { x } else { &t.acts[i - 1] };
            match self.convs[i].backward(input, &d, &mut grad.convs[i], i > 0) {
                Some(dx) => d = relu_backward(input, &dx),
                None => break,
            }
        }
        Ok((loss, grad))
    }
}

impl<T: Scalar> Model<T> for Cnn<T> {
    type Arch = CnnArch;
    const KIND: &'static str = "cnn";

    fn build(arch: &CnnArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut in_c = 1;
        for &c in &arch.channels {
            convs.push(Conv2d::new(in_c, c, arch.kernel, STRIDE, PADDING, &mut rng));
            in_c = c;
        }
        let fc = Linear::new(in_c, arch.head.outputs(), &mut rng);
        Ok(Self {
            arch: arch.clone(),
            convs,
            fc,
        })
    }

    fn arch(&self) -> &CnnArch {
        &self.arch
    }

    fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            convs: self.convs.iter().map(Conv2d::zeros_like).collect(),
            fc: self.fc.zeros_like(),
        }
    }

    fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.convs.iter().enumerate() {
            out.push((format!("conv.{i}.weight"), &l.weight));
            out.push((format!("conv.{i}.bias"), &l.bias));
        }
        out.push(("head.weight".to_string(), &self.fc.weight));
        out.push(("head.bias".to_string(), &self.fc.bias));
        out
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.convs.iter_mut().enumerate() {
            out.push((format!("conv.{i}.weight"), &mut l.weight));
            out.push((format!("conv.{i}.bias"), &mut l.bias));
        }
        out.push(("head.weight".to_string(), &mut self.fc.weight));
        out.push(("head.bias".to_string(), &mut self.fc.bias));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(head: HeadKind) -> Cnn<f64> {
        Cnn::build(
            &CnnArch {
                input_size: 12,
                channels: vec![2, 3],
                kernel: 3,
                head,
            },
            5,
        )
        .unwrap()
    }

    fn image(seed: u64) -> Tensor<f64> {
        let data = (0..144)
            .map(|i| ((i as f64 + seed as f64) * 0.37).sin().abs())
            .collect();
        Tensor::from_vec(&[1, 1, 12, 12], data).unwrap()
    }

    #[test]
    fn default_feature_map_is_eleven_square() {
        let arch = CnnArch::default();
        assert_eq!(arch.feature_size(), 11);
        assert_eq!(arch.feature_channels(), 128);
    }

    #[test]
    fn head_on_returned_features_reproduces_score() {
        for head in [HeadKind::SingleLogit, HeadKind::TwoLogit] {
            let cnn = tiny(head);
            let x = image(3);
            let (y, a) = cnn.forward_with_features(&x).unwrap();
            assert_eq!(a.channels(), 3);
            assert_eq!((a.height(), a.width()), (3, 3));
            assert_eq!(cnn.head_score(&a).unwrap(), y);
            assert_eq!(cnn.scores(&x).unwrap()[0], y);
            let p = cnn.normal_probabilities(&x).unwrap()[0];
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn objective_matches_hand_values() {
        assert_eq!(squared_error_objective(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!((squared_error_objective(&[0.6], &[1.0]).unwrap() - 0.16).abs() < 1e-15);
    }

    #[test]
    fn labels_outside_binary_set_are_rejected() {
        let cnn = tiny(HeadKind::SingleLogit);
        assert!(matches!(cnn.loss(&image(0), &[0.5]), Err(Error::InvalidLabel(_))));
        assert!(cnn.loss_and_grad(&image(0), &[2.0]).is_err());
    }
}
