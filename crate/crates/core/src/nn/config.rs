use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FEATURE_DIM;

/// Shape and regularization of the two-layer LSTM embedder.
///
/// The embedding is the second layer's hidden state, so its width is
/// `lstm_units`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Keystrokes per input (M).
    pub input_length: usize,
    pub feature_dim: usize,
    pub lstm_units: usize,
    /// Dropout on the first layer's output, after batch normalization.
    pub inter_layer_dropout: f64,
    /// Dropout on each LSTM layer's input connections.
    pub lstm_dropout: f64,
    pub bn_epsilon: f64,
    /// Weight of the old value in the running batch-norm statistics.
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_length: 50,
            feature_dim: FEATURE_DIM,
            lstm_units: 128,
            inter_layer_dropout: 0.5,
            lstm_dropout: 0.2,
            bn_epsilon: 1e-3,
            bn_momentum: 0.99,
        }
    }
}

impl ModelConfig {
    pub fn embedding_dim(&self) -> usize {
        self.lstm_units
    }

    /// Same shape with both dropout rates set to zero.
    pub fn without_dropout(&self) -> Self {
        Self {
            inter_layer_dropout: 0.0,
            lstm_dropout: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rate_ok = |r: f64| (0.0..1.0).contains(&r);
        if self.input_length == 0 || self.lstm_units == 0 {
            return Err(Error::Config("input_length and lstm_units must be >= 1".into()));
        }
        if self.feature_dim != FEATURE_DIM {
            return Err(Error::Config(format!(
                "feature_dim must be {FEATURE_DIM}, got {}",
                self.feature_dim
            )));
        }
        if !rate_ok(self.inter_layer_dropout) || !rate_ok(self.lstm_dropout) {
            return Err(Error::Config("dropout rates must lie in [0, 1)".into()));
        }
        if !(self.bn_epsilon > 0.0) || !rate_ok(self.bn_momentum) {
            return Err(Error::Config("bn_epsilon must be > 0 and bn_momentum in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Optimizer and loss settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Contrastive margin (alpha).
    pub margin: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            margin: 1.5,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) {
            return Err(Error::Config("margin must be >= 0".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::Config("learning rate and epsilon must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}
