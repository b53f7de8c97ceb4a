use serde::{Deserialize, Serialize};

use super::model::Model;
use super::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adaptive-moment gradient descent with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<M: Model<T>>(model: &M, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor<T>> = model
            .parameters()
            .iter()
            .map(|(_, p)| Tensor::zeros(p.shape()))
            .collect();
        Self {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn update<M: Model<T>>(&mut self, model: &mut M, grad: &M) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr = c.learning_rate * (1.0 - c.beta2.powi(t)).sqrt() / (1.0 - c.beta1.powi(t));
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (lr, eps) = (T::from_f64_lossy(lr), T::from_f64_lossy(c.epsilon));
        let grads = grad.parameters();
        for (i, (_, p)) in model.parameters_mut().into_iter().enumerate() {
            let g = grads[i].1.data();
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                *w -= lr * m[j] / (v[j].sqrt() + eps);
            }
        }
    }
}
