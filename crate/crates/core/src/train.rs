//! Siamese training loop.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelCheckpoint;
use crate::data::UserCollection;
use crate::error::{Error, Result};
use crate::features::{PairLabel, PairPool};
use crate::nn::params::INIT_SCHEME;
use crate::nn::{adam_step, AdamState, InitDescriptor, Model, ModelConfig, TrainHyper};
use crate::seed::{self, Stream};

/// How `batch_size` is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchSemantics {
    /// `batch_size` pairs, i.e. `2 * batch_size` sequences.
    Pairs,
    /// `batch_size` sequences, i.e. `batch_size / 2` pairs.
    Sequences,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub batch_semantics: BatchSemantics,
    pub hyper: TrainHyper,
    pub model: ModelConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batches_per_epoch: 150,
            batch_size: 512,
            batch_semantics: BatchSemantics::Pairs,
            hyper: TrainHyper::default(),
            model: ModelConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn pairs_per_batch(&self) -> usize {
        match self.batch_semantics {
            BatchSemantics::Pairs => self.batch_size,
            BatchSemantics::Sequences => self.batch_size / 2,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.batches_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batches_per_epoch == 0 || self.pairs_per_batch() == 0 {
            return Err(Error::Config(
                "epochs, batches per epoch and pairs per batch must all be >= 1".into(),
            ));
        }
        self.model.validate()?;
        self.hyper.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub genuine_distance: f64,
    pub impostor_distance: f64,
    pub duration: Duration,
}

/// Training stopped early. `last_good` holds the weights before the failing step.
#[derive(Debug)]
pub struct TrainError {
    pub source: Error,
    pub epoch: usize,
    pub batch: usize,
    pub last_good: Option<Box<ModelCheckpoint>>,
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "training failed at epoch {} batch {}: {}", self.epoch, self.batch, self.source)
    }
}

impl std::error::Error for TrainError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

impl From<TrainError> for Error {
    fn from(e: TrainError) -> Self {
        e.source
    }
}

/// The untrained starting point for a configuration and seed.
pub fn initial_checkpoint(config: &TrainConfig) -> Result<ModelCheckpoint> {
    config.validate()?;
    let model = Model::init(config.model.clone(), &mut seed::rng(config.seed, Stream::Init))?;
    Ok(ModelCheckpoint {
        model,
        init: InitDescriptor {
            scheme: INIT_SCHEME.into(),
            seed: config.seed,
        },
        steps: 0,
    })
}

/// Runs `epochs * batches_per_epoch` Adam steps, each on a freshly sampled
/// balanced pair batch. Batch-norm running statistics follow the batch
/// statistics with the configured momentum. The result depends only on the
/// data, the configuration and the seed.
pub fn train(
    train_users: &UserCollection,
    config: &TrainConfig,
) -> std::result::Result<(ModelCheckpoint, Vec<TrainLogRecord>), TrainError> {
    let early = |source: Error| TrainError {
        source,
        epoch: 0,
        batch: 0,
        last_good: None,
    };
    let mut ckpt = initial_checkpoint(config).map_err(early)?;
    let pool = PairPool::new(train_users, config.model.input_length).map_err(early)?;
    let mut sample_rng = seed::rng(config.seed, Stream::PairSampling);
    let mut dropout_rng = seed::rng(config.seed, Stream::Dropout);
    let mut adam = AdamState::new(&ckpt.model.params.weights);
    let momentum = config.model.bn_momentum;
    let pairs = config.pairs_per_batch();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let (mut loss_sum, mut gen_sum, mut imp_sum) = (0.0, 0.0, 0.0);
        let (mut gen_n, mut imp_n) = (0usize, 0usize);
        for b in 0..config.batches_per_epoch {
            let fail = |source: Error, ckpt: &ModelCheckpoint| TrainError {
                source,
                epoch,
                batch: b,
                last_good: Some(Box::new(ckpt.clone())),
            };
            let batch = pool.sample(pairs, &mut sample_rng).map_err(|e| fail(e, &ckpt))?;
            let out = ckpt
                .model
                .compute_gradients(&batch, &config.hyper, &mut dropout_rng)
                .map_err(|e| fail(e, &ckpt))?;
            let mut next = ckpt.model.params.clone();
            adam_step(&mut next.weights, &out.grads, &mut adam, &config.hyper);
            next.update_running_stats(&out.batch_mean, &out.batch_var, momentum);
            if !next.weights.all_finite() {
                return Err(fail(
                    Error::NumericalDivergence("non-finite parameters after update".into()),
                    &ckpt,
                ));
            }
            ckpt.model.params = next;
            ckpt.steps += 1;

            loss_sum += out.loss;
            for (d, label) in out.distances.iter().zip(&batch.labels) {
                match label {
                    PairLabel::Genuine => {
                        gen_sum += d;
                        gen_n += 1;
                    }
                    PairLabel::Impostor => {
                        imp_sum += d;
                        imp_n += 1;
                    }
                }
            }
        }
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        let record = TrainLogRecord {
            epoch,
            mean_loss: loss_sum / config.batches_per_epoch as f64,
            genuine_distance: mean(gen_sum, gen_n),
            impostor_distance: mean(imp_sum, imp_n),
            duration: started.elapsed(),
        };
        log::info!(
            "epoch {:>4}  loss {:.5}  genuine {:.4}  impostor {:.4}  ({:.1?})",
            record.epoch,
            record.mean_loss,
            record.genuine_distance,
            record.impostor_distance,
            record.duration
        );
        log.push(record);
    }
    Ok((ckpt, log))
}

/// Writes the deterministic part of the epoch log (no wall-clock times).
pub fn write_train_log(records: &[TrainLogRecord], path: &Path, preamble: &[String]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        for line in preamble {
            writeln!(out, "# {line}")?;
        }
        writeln!(out, "epoch\tmean_loss\tgenuine_distance\timpostor_distance")?;
        for r in records {
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                r.epoch, r.mean_loss, r.genuine_distance, r.impostor_distance
            )?;
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Wall-clock seconds per epoch.
pub fn write_timing_log(records: &[TrainLogRecord], path: &Path) -> Result<()> {
    let mut text = String::from("epoch\tseconds\n");
    for r in records {
        text.push_str(&format!("{}\t{:.3}\n", r.epoch, r.duration.as_secs_f64()));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
