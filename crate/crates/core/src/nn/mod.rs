//! Numerical core: masked LSTM embedder, contrastive loss and Adam.

pub mod activation;
pub mod adam;
pub mod config;
pub mod loss;
pub mod lstm;
pub mod model;
pub mod params;

pub use adam::{adam_step, AdamState};
pub use config::{ModelConfig, TrainHyper};
pub use loss::{contrastive_loss, euclidean_distance, Embedding};
pub use model::{GradientOutput, Mode, Model};
pub use params::{InitDescriptor, LstmWeights, ModelParams, ParamSet, TENSOR_NAMES};
