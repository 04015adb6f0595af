use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};

/// Weights of one LSTM layer. Gate blocks along the `4H` axis are ordered
/// input, forget, cell candidate, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights {
    /// `in x 4H`
    pub w_input: Array2<f64>,
    /// `H x 4H`
    pub w_recurrent: Array2<f64>,
    /// `4H`
    pub bias: Array1<f64>,
}

impl LstmWeights {
    pub fn zeros(input: usize, units: usize) -> Self {
        Self {
            w_input: Array2::zeros((input, 4 * units)),
            w_recurrent: Array2::zeros((units, 4 * units)),
            bias: Array1::zeros(4 * units),
        }
    }

    pub fn units(&self) -> usize {
        self.w_recurrent.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_input.nrows()
    }

    fn init(input: usize, units: usize, rng: &mut impl Rng) -> Self {
        let mut bias = Array1::zeros(4 * units);
        bias.slice_mut(ndarray::s![units..2 * units]).fill(1.0);
        Self {
            w_input: glorot_uniform(input, 4 * units, rng),
            w_recurrent: orthogonal(units, 4 * units, rng),
            bias,
        }
    }
}

fn glorot_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..limit))
}

/// `rows x cols` matrix whose shorter side is orthonormal: QR of a Gaussian
/// matrix via modified Gram-Schmidt, signs fixed so that diag(R) > 0.
fn orthogonal(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let (long, short) = (rows.max(cols), rows.min(cols));
    let mut a: Array2<f64> = Array2::from_shape_simple_fn((long, short), || rng.sample(StandardNormal));
    for j in 0..short {
        for k in 0..j {
            let proj = a.column(j).dot(&a.column(k));
            let qk = a.column(k).to_owned();
            a.column_mut(j).scaled_add(-proj, &qk);
        }
        let norm = a.column(j).dot(&a.column(j)).sqrt();
        a.column_mut(j).mapv_inplace(|v| v / norm);
    }
    if rows < cols {
        a.reversed_axes().as_standard_layout().into_owned()
    } else {
        a
    }
}

/// All learnable tensors. Gradients and Adam moments share this shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub lstm1: LstmWeights,
    pub bn_gamma: Array1<f64>,
    pub bn_beta: Array1<f64>,
    pub lstm2: LstmWeights,
}

/// Tensor names in storage order.
pub const TENSOR_NAMES: [&str; 8] = [
    "lstm1.w_input",
    "lstm1.w_recurrent",
    "lstm1.bias",
    "bn.gamma",
    "bn.beta",
    "lstm2.w_input",
    "lstm2.w_recurrent",
    "lstm2.bias",
];

impl ParamSet {
    pub fn zeros(config: &ModelConfig) -> Self {
        let h = config.lstm_units;
        Self {
            lstm1: LstmWeights::zeros(config.feature_dim, h),
            bn_gamma: Array1::zeros(h),
            bn_beta: Array1::zeros(h),
            lstm2: LstmWeights::zeros(h, h),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            lstm1: LstmWeights::zeros(self.lstm1.input_dim(), self.lstm1.units()),
            bn_gamma: Array1::zeros(self.bn_gamma.len()),
            bn_beta: Array1::zeros(self.bn_beta.len()),
            lstm2: LstmWeights::zeros(self.lstm2.input_dim(), self.lstm2.units()),
        }
    }

    /// Flat views of every tensor, in [`TENSOR_NAMES`] order.
    pub fn tensors(&self) -> [&[f64]; 8] {
        fn s(a: Option<&[f64]>) -> &[f64] {
            a.expect("parameters are kept in standard layout")
        }
        [
            s(self.lstm1.w_input.as_slice()),
            s(self.lstm1.w_recurrent.as_slice()),
            s(self.lstm1.bias.as_slice()),
            s(self.bn_gamma.as_slice()),
            s(self.bn_beta.as_slice()),
            s(self.lstm2.w_input.as_slice()),
            s(self.lstm2.w_recurrent.as_slice()),
            s(self.lstm2.bias.as_slice()),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 8] {
        fn s(a: Option<&mut [f64]>) -> &mut [f64] {
            a.expect("parameters are kept in standard layout")
        }
        [
            s(self.lstm1.w_input.as_slice_mut()),
            s(self.lstm1.w_recurrent.as_slice_mut()),
            s(self.lstm1.bias.as_slice_mut()),
            s(self.bn_gamma.as_slice_mut()),
            s(self.bn_beta.as_slice_mut()),
            s(self.lstm2.w_input.as_slice_mut()),
            s(self.lstm2.w_recurrent.as_slice_mut()),
            s(self.lstm2.bias.as_slice_mut()),
        ]
    }

    pub fn shapes(&self) -> [Vec<usize>; 8] {
        [
            self.lstm1.w_input.shape().to_vec(),
            self.lstm1.w_recurrent.shape().to_vec(),
            self.lstm1.bias.shape().to_vec(),
            self.bn_gamma.shape().to_vec(),
            self.bn_beta.shape().to_vec(),
            self.lstm2.w_input.shape().to_vec(),
            self.lstm2.w_recurrent.shape().to_vec(),
            self.lstm2.bias.shape().to_vec(),
        ]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Learnable weights plus the batch-norm running statistics used at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub weights: ParamSet,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

/// How a parameter set was initialized; stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitDescriptor {
    pub scheme: String,
    pub seed: u64,
}

pub const INIT_SCHEME: &str =
    "input: glorot-uniform; recurrent: orthogonal; bias: 0, forget 1; bn: gamma 1, beta 0, mean 0, var 1";

impl ModelParams {
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let h = config.lstm_units;
        let lstm1 = LstmWeights::init(config.feature_dim, h, rng);
        let lstm2 = LstmWeights::init(h, h, rng);
        Self {
            weights: ParamSet {
                lstm1,
                bn_gamma: Array1::ones(h),
                bn_beta: Array1::zeros(h),
                lstm2,
            },
            running_mean: Array1::zeros(h),
            running_var: Array1::ones(h),
        }
    }

    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = ParamSet::zeros(config).shapes();
        let got = self.weights.shapes();
        for ((name, e), g) in TENSOR_NAMES.iter().zip(&expected).zip(&got) {
            if e != g {
                return Err(Error::Config(format!("{name}: expected shape {e:?}, got {g:?}")));
            }
        }
        let h = config.lstm_units;
        if self.running_mean.len() != h || self.running_var.len() != h {
            return Err(Error::Config("running statistics do not match lstm_units".into()));
        }
        if self.running_var.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Config("running variance must be non-negative".into()));
        }
        Ok(())
    }

    /// Blends batch statistics into the running ones:
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_running_stats(&mut self, mean: &Array1<f64>, var: &Array1<f64>, momentum: f64) {
        self.running_mean *= momentum;
        self.running_mean.scaled_add(1.0 - momentum, mean);
        self.running_var *= momentum;
        self.running_var.scaled_add(1.0 - momentum, var);
    }
}

pub(crate) fn sum_rows(a: &Array2<f64>) -> Array1<f64> {
    a.sum_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let q = orthogonal(4, 16, &mut ChaCha8Rng::seed_from_u64(0));
        let gram = q.dot(&q.t());
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn init_shapes_and_forget_bias() {
        let cfg = ModelConfig {
            lstm_units: 3,
            ..Default::default()
        };
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        p.check_shapes(&cfg).unwrap();
        assert_eq!(p.weights.lstm1.bias.to_vec(), vec![0., 0., 0., 1., 1., 1., 0., 0., 0., 0., 0., 0.]);
        let limit = (6.0f64 / (5.0 + 12.0)).sqrt();
        assert!(p.weights.lstm1.w_input.iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn shape_mismatch_detected() {
        let cfg = ModelConfig {
            lstm_units: 3,
            ..Default::default()
        };
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let other = ModelConfig {
            lstm_units: 4,
            ..Default::default()
        };
        assert!(p.check_shapes(&other).is_err());
    }
}
