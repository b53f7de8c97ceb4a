//! Small CPU neural-network engine: tensors, layers, the two models used by
//! the detector, Adam, training loops and checkpoints.

pub mod checkpoint;
pub mod cnn;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod vae;

pub use checkpoint::{load_checkpoint, load_model, save_checkpoint, CheckpointMeta, CHECKPOINT_SCHEMA_VERSION};
pub use cnn::{squared_error_objective, Cnn, CnnArch, FeatureStack, HeadKind};
pub use model::Model;
pub use optim::{Adam, AdamConfig};
pub use tensor::{Scalar, Tensor};
pub use train::{resume_cnn, resume_vae, train_cnn, train_vae, ClassifierData, EpochRecord, TrainConfig, TrainState};
pub use vae::{negative_elbo, Vae, VaeArch, VaeLoss};
