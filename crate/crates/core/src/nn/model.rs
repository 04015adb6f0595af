//! The Siamese embedder: masked LSTM, batch norm, dropout, masked LSTM.
//!
//! ```text
//! x (M x 5) -> dropout(lstm) -> LSTM -> batch norm -> dropout(inter-layer)
//!           -> dropout(lstm) -> LSTM -> hidden state at last valid step
//! ```
//!
//! Dropout masks are drawn per sample and per feature and reused across all
//! timesteps of the sample. Batch-norm statistics are pooled over every valid
//! (sample, timestep) position of the batch; padded positions are excluded.

use ndarray::{s, Array1, Array2};
use rand::Rng;

use super::config::{ModelConfig, TrainHyper};
use super::lstm::{self, LstmCache};
use super::loss::{contrastive_grad_coeff, contrastive_loss, distance, Embedding};
use super::params::{ModelParams, ParamSet};
use crate::error::{Error, Result};
use crate::features::{PairBatch, PaddedInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Per-sample inverted-dropout multipliers (0 or `1 / (1 - rate)`).
struct DropoutMasks {
    input1: Option<Array2<f64>>,
    input2: Option<Array2<f64>>,
}

fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut impl Rng) -> Option<Array2<f64>> {
    (rate > 0.0).then(|| {
        let keep = 1.0 / (1.0 - rate);
        Array2::from_shape_simple_fn((rows, cols), || {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
    })
}

/// Multiplies every timestep row of a time-major matrix by the sample's mask row.
fn apply_sample_mask(values: &mut Array2<f64>, mask: &Array2<f64>) {
    let batch = mask.nrows();
    for (r, mut row) in values.rows_mut().into_iter().enumerate() {
        row *= &mask.row(r % batch);
    }
}

struct BatchNormCache {
    x_hat: Array2<f64>,
    inv_std: Array1<f64>,
    count: usize,
}

/// Intermediates kept by a training forward pass.
pub struct ForwardCache {
    valid_len: Vec<usize>,
    lstm1: LstmCache,
    bn: BatchNormCache,
    masks: DropoutMasks,
    lstm2: LstmCache,
}

/// Result of a training-mode forward pass over a batch of sequences.
pub struct TrainForward {
    /// `B x H`, one row per input.
    pub embeddings: Array2<f64>,
    pub batch_mean: Array1<f64>,
    /// Unbiased variance over valid positions.
    pub batch_var: Array1<f64>,
    cache: ForwardCache,
}

/// Loss, gradients and bookkeeping for one pair batch.
pub struct GradientOutput {
    pub loss: f64,
    pub grads: ParamSet,
    pub distances: Vec<f64>,
    pub batch_mean: Array1<f64>,
    pub batch_var: Array1<f64>,
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }

    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, rng);
        Ok(Self { config, params })
    }

    /// Stacks inputs into a time-major `(T * B) x 5` matrix.
    fn stack(&self, inputs: &[&PaddedInput]) -> Result<(Array2<f64>, Vec<usize>)> {
        let batch = inputs.len();
        let steps = inputs[0].len();
        let dim = self.config.feature_dim;
        let mut x = Array2::zeros((steps * batch, dim));
        let mut valid_len = Vec::with_capacity(batch);
        for (b, input) in inputs.iter().enumerate() {
            if input.len() != steps || input.matrix.dim() != (steps, dim) {
                return Err(Error::Config(format!(
                    "input {b} has shape {:?}, expected ({steps}, {dim})",
                    input.matrix.dim()
                )));
            }
            let n = input.valid_len();
            for t in 0..n {
                x.row_mut(t * batch + b).assign(&input.matrix.row(t));
            }
            valid_len.push(n);
        }
        Ok((x, valid_len))
    }

    fn check_batch(&self, inputs: &[&PaddedInput]) -> Result<()> {
        if inputs.is_empty() {
            return Err(Error::Config("empty input batch".into()));
        }
        Ok(())
    }

    /// Inference embeddings. Batch norm uses the running statistics and dropout
    /// is off, so each embedding depends only on its own input.
    pub fn embed_batch(&self, inputs: &[&PaddedInput]) -> Result<Vec<Embedding>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let (x, valid_len) = self.stack(inputs)?;
        let batch = valid_len.len();
        let w = &self.params.weights;
        let (mut h1, _) = lstm::forward(&w.lstm1, x, &valid_len, false);
        let inv_std = self
            .params
            .running_var
            .mapv(|v| 1.0 / (v + self.config.bn_epsilon).sqrt());
        let scale = &inv_std * &w.bn_gamma;
        let shift = &w.bn_beta - &(&self.params.running_mean * &scale);
        for mut row in h1.rows_mut() {
            row *= &scale;
            row += &shift;
        }
        let (h2, _) = lstm::forward(&w.lstm2, h1, &valid_len, false);
        let steps = h2.nrows() / batch;
        let last = h2.slice(s![(steps - 1) * batch.., ..]);
        let out: Vec<Embedding> = last.rows().into_iter().map(|r| Embedding(r.to_vec())).collect();
        if out.iter().any(|e| e.0.iter().any(|v| !v.is_finite())) {
            return Err(Error::NumericalDivergence("non-finite embedding".into()));
        }
        Ok(out)
    }

    pub fn embed(&self, input: &PaddedInput) -> Result<Embedding> {
        Ok(self.embed_batch(&[input])?.remove(0))
    }

    /// Embeds a batch in the given mode. Training mode draws dropout masks
    /// from `rng` and normalizes with batch statistics.
    pub fn forward(&self, inputs: &[&PaddedInput], mode: Mode, rng: &mut impl Rng) -> Result<Vec<Embedding>> {
        match mode {
            Mode::Inference => self.embed_batch(inputs),
            Mode::Train => {
                let fwd = self.forward_train(inputs, rng)?;
                Ok(fwd
                    .embeddings
                    .rows()
                    .into_iter()
                    .map(|r| Embedding(r.to_vec()))
                    .collect())
            }
        }
    }

    pub fn forward_train(&self, inputs: &[&PaddedInput], rng: &mut impl Rng) -> Result<TrainForward> {
        self.check_batch(inputs)?;
        let (mut x, valid_len) = self.stack(inputs)?;
        let batch = valid_len.len();
        let steps = x.nrows() / batch;
        let h = self.config.lstm_units;
        let w = &self.params.weights;

        let masks = DropoutMasks {
            input1: dropout_mask(batch, self.config.feature_dim, self.config.lstm_dropout, rng),
            input2: {
                let inter = dropout_mask(batch, h, self.config.inter_layer_dropout, rng);
                let own = dropout_mask(batch, h, self.config.lstm_dropout, rng);
                match (inter, own) {
                    (Some(a), Some(b)) => Some(a * b),
                    (a, b) => a.or(b),
                }
            },
        };
        if let Some(m) = &masks.input1 {
            apply_sample_mask(&mut x, m);
        }
        let (h1, cache1) = lstm::forward(&w.lstm1, x, &valid_len, true);

        // batch statistics over valid positions
        let count: usize = valid_len.iter().sum();
        if count == 0 {
            return Err(Error::Config("batch has no valid timesteps".into()));
        }
        let is_valid = |r: usize| (r / batch) < valid_len[r % batch];
        let mut mean = Array1::<f64>::zeros(h);
        for (r, row) in h1.rows().into_iter().enumerate() {
            if is_valid(r) {
                mean += &row;
            }
        }
        mean /= count as f64;
        let mut var = Array1::<f64>::zeros(h);
        for (r, row) in h1.rows().into_iter().enumerate() {
            if is_valid(r) {
                for k in 0..h {
                    let d = row[k] - mean[k];
                    var[k] += d * d;
                }
            }
        }
        let biased = &var / count as f64;
        let unbiased = if count > 1 {
            &var / (count - 1) as f64
        } else {
            biased.clone()
        };
        let inv_std = biased.mapv(|v| 1.0 / (v + self.config.bn_epsilon).sqrt());
        let mut x_hat = Array2::<f64>::zeros((steps * batch, h));
        let mut y = Array2::<f64>::zeros((steps * batch, h));
        for r in 0..steps * batch {
            if !is_valid(r) {
                continue;
            }
            for k in 0..h {
                let xh = (h1[[r, k]] - mean[k]) * inv_std[k];
                x_hat[[r, k]] = xh;
                y[[r, k]] = w.bn_gamma[k] * xh + w.bn_beta[k];
            }
        }
        if let Some(m) = &masks.input2 {
            apply_sample_mask(&mut y, m);
        }
        let (h2, cache2) = lstm::forward(&w.lstm2, y, &valid_len, true);
        let embeddings = h2.slice(s![(steps - 1) * batch.., ..]).to_owned();
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalDivergence("non-finite embedding in training pass".into()));
        }
        Ok(TrainForward {
            embeddings,
            batch_mean: mean,
            batch_var: unbiased,
            cache: ForwardCache {
                valid_len,
                lstm1: cache1.expect("cache requested"),
                bn: BatchNormCache {
                    x_hat,
                    inv_std,
                    count,
                },
                masks,
                lstm2: cache2.expect("cache requested"),
            },
        })
    }

    /// Gradients of a scalar loss given `d_embeddings` (`B x H`), the loss
    /// gradient with respect to each embedding row.
    pub fn backward(&self, fwd: &TrainForward, d_embeddings: &Array2<f64>) -> ParamSet {
        let cache = &fwd.cache;
        let valid_len = &cache.valid_len;
        let batch = valid_len.len();
        let steps = cache.bn.x_hat.nrows() / batch;
        let h = self.config.lstm_units;
        let w = &self.params.weights;
        let mut grads = w.zeros_like();

        let mut d_h2 = Array2::<f64>::zeros((steps * batch, h));
        d_h2.slice_mut(s![(steps - 1) * batch.., ..]).assign(d_embeddings);
        let mut d_y = lstm::backward(&w.lstm2, &cache.lstm2, valid_len, d_h2.view(), &mut grads.lstm2);
        if let Some(m) = &cache.masks.input2 {
            apply_sample_mask(&mut d_y, m);
        }

        // batch norm over valid positions
        let is_valid = |r: usize| (r / batch) < valid_len[r % batch];
        let x_hat = &cache.bn.x_hat;
        let mut sum_dy = Array1::<f64>::zeros(h);
        let mut sum_dy_xhat = Array1::<f64>::zeros(h);
        for r in 0..steps * batch {
            if !is_valid(r) {
                continue;
            }
            for k in 0..h {
                sum_dy[k] += d_y[[r, k]];
                sum_dy_xhat[k] += d_y[[r, k]] * x_hat[[r, k]];
            }
        }
        grads.bn_beta.assign(&sum_dy);
        grads.bn_gamma.assign(&sum_dy_xhat);
        let n = cache.bn.count as f64;
        let mut d_h1 = Array2::<f64>::zeros((steps * batch, h));
        for r in 0..steps * batch {
            if !is_valid(r) {
                continue;
            }
            for k in 0..h {
                let coeff = w.bn_gamma[k] * cache.bn.inv_std[k] / n;
                d_h1[[r, k]] = coeff * (n * d_y[[r, k]] - sum_dy[k] - x_hat[[r, k]] * sum_dy_xhat[k]);
            }
        }
        lstm::backward(&w.lstm1, &cache.lstm1, valid_len, d_h1.view(), &mut grads.lstm1);
        grads
    }

    /// Mean contrastive loss over the batch and its gradient.
    ///
    /// Left and right inputs run through the shared weights as one batch of
    /// `2P` sequences, so batch-norm statistics cover both branches and the
    /// gradients of the two branches add up.
    pub fn compute_gradients(
        &self,
        batch: &PairBatch,
        hyper: &TrainHyper,
        rng: &mut impl Rng,
    ) -> Result<GradientOutput> {
        let pairs = batch.len();
        if pairs == 0 || batch.left.len() != pairs || batch.right.len() != pairs {
            return Err(Error::Config("pair batch must be non-empty with matching sides".into()));
        }
        let inputs: Vec<&PaddedInput> = batch.left.iter().chain(batch.right.iter()).collect();
        let fwd = self.forward_train(&inputs, rng)?;
        let emb = &fwd.embeddings;
        let mut d_emb = Array2::<f64>::zeros(emb.dim());
        let mut loss = 0.0;
        let mut distances = Vec::with_capacity(pairs);
        let scale = 1.0 / pairs as f64;
        for p in 0..pairs {
            let left = emb.row(p);
            let right = emb.row(pairs + p);
            let d = distance(
                left.as_slice().expect("contiguous"),
                right.as_slice().expect("contiguous"),
            );
            let label = batch.labels[p];
            loss += contrastive_loss(d, label, hyper.margin);
            distances.push(d);
            let coeff = scale * contrastive_grad_coeff(d, label, hyper.margin);
            if coeff != 0.0 {
                let diff = &left - &right;
                d_emb.row_mut(p).scaled_add(coeff, &diff);
                d_emb.row_mut(pairs + p).scaled_add(-coeff, &diff);
            }
        }
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::NumericalDivergence(format!("loss is {loss}")));
        }
        let grads = self.backward(&fwd, &d_emb);
        if !grads.all_finite() {
            return Err(Error::NumericalDivergence("non-finite gradient".into()));
        }
        Ok(GradientOutput {
            loss,
            grads,
            distances,
            batch_mean: fwd.batch_mean,
            batch_var: fwd.batch_var,
        })
    }

    /// Mean contrastive loss only; dropout masks drawn as in
    /// [`Model::compute_gradients`].
    pub fn batch_loss(&self, batch: &PairBatch, hyper: &TrainHyper, rng: &mut impl Rng) -> Result<f64> {
        let inputs: Vec<&PaddedInput> = batch.left.iter().chain(batch.right.iter()).collect();
        let fwd = self.forward_train(&inputs, rng)?;
        let pairs = batch.len();
        let emb = &fwd.embeddings;
        let total: f64 = (0..pairs)
            .map(|p| {
                let d = distance(
                    emb.row(p).as_slice().expect("contiguous"),
                    emb.row(pairs + p).as_slice().expect("contiguous"),
                );
                contrastive_loss(d, batch.labels[p], hyper.margin)
            })
            .sum();
        Ok(total / pairs as f64)
    }
}
