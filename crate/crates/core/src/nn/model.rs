use serde::de::DeserializeOwned;
use serde::Serialize;

use super::tensor::{Scalar, Tensor};
use crate::error::Result;

/// A network whose parameters can be enumerated by stable names.
///
/// Gradients are represented by a second instance of the same model
/// (`zeros_like`), so parameter lists of a model and its gradient line up
/// index for index.
pub trait Model<T: Scalar>: Clone + Send + Sync {
    type Arch: Serialize + DeserializeOwned + Clone + PartialEq + std::fmt::Debug;

    /// Tag written into checkpoints.
    const KIND: &'static str;

    fn build(arch: &Self::Arch, seed: u64) -> Result<Self>;

    fn arch(&self) -> &Self::Arch;

    fn zeros_like(&self) -> Self;

    fn parameters(&self) -> Vec<(String, &Tensor<T>)>;

    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }
}
