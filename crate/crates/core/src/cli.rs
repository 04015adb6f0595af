//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::{load_checkpoint, save_checkpoint, ModelCheckpoint};
use crate::data::{self, SyntheticSpec, TextFormat, UserCollection};
use crate::error::{Error, Result};
use crate::eval::{self, ProtocolConfig};
use crate::features::FEATURE_DIM;
use crate::nn::{ModelConfig, TrainHyper};
use crate::train::{self, BatchSemantics, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "keydyn", version, about = "Free-text keystroke verification with a Siamese LSTM")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    /// Worker threads for embedding and scoring. Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic keystroke dataset.
    Generate(GenerateArgs),
    /// Split users and train a model.
    Train(TrainArgs),
    /// Write one embedding per sequence.
    Embed(EmbedArgs),
    /// Score one protocol configuration.
    Evaluate(EvaluateArgs),
    /// Score a grid of protocol configurations.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct OutDir {
    /// Directory for all outputs.
    #[arg(long, env = "KEYDYN_OUT_DIR", default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 100)]
    pub users: usize,
    /// Sessions per user.
    #[arg(long, default_value_t = 15)]
    pub seqs: usize,
    #[arg(long, default_value_t = 50)]
    pub min_keys: usize,
    #[arg(long, default_value_t = 80)]
    pub max_keys: usize,
    /// Within-user timing noise relative to the user's profile.
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SemanticsArg {
    Pairs,
    Sequences,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset in the delimited keystroke format.
    #[arg(long)]
    pub data: PathBuf,
    /// Fraction of users used for training; the rest are held out.
    #[arg(long, default_value_t = 0.75)]
    pub train_fraction: f64,
    #[arg(long = "M", default_value_t = 50)]
    pub m: usize,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    /// Batches per epoch.
    #[arg(long, default_value_t = 150)]
    pub batches: usize,
    #[arg(long, default_value_t = 512)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value_t = SemanticsArg::Pairs)]
    pub batch_semantics: SemanticsArg,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    /// Contrastive margin.
    #[arg(long = "alpha", default_value_t = 1.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 128)]
    pub units: usize,
    #[arg(long, default_value_t = 0.5)]
    pub dropout: f64,
    #[arg(long, default_value_t = 0.2)]
    pub lstm_dropout: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Sequence length; defaults to the checkpoint's.
    #[arg(long = "M")]
    pub m: Option<usize>,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Args)]
pub struct ProtocolArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Split file from `train`; only its held-out users are evaluated.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Trailing sessions per user used as genuine queries.
    #[arg(long, default_value_t = 5)]
    pub test_seqs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: ProtocolArgs,
    #[arg(long = "M", default_value_t = 50)]
    pub m: usize,
    #[arg(long = "G", default_value_t = 5)]
    pub g: usize,
    #[arg(long = "K", default_value_t = 100)]
    pub k: usize,
    /// Also write pooled FAR/FRR operating points.
    #[arg(long)]
    pub roc: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: ProtocolArgs,
    #[arg(long = "M", value_delimiter = ',', default_value = "30,50,70,100,150")]
    pub m: Vec<usize>,
    #[arg(long = "G", value_delimiter = ',', default_value = "1,2,5,7,10")]
    pub g: Vec<usize>,
    #[arg(long = "K", value_delimiter = ',', default_value = "100")]
    pub k: Vec<usize>,
}

pub const DATASET_FILE: &str = "dataset.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const PARTIAL_CHECKPOINT_FILE: &str = "checkpoint.partial.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.tsv";
pub const TIMING_FILE: &str = "train_timing.tsv";
pub const SPLIT_FILE: &str = "split.tsv";
pub const EMBEDDINGS_FILE: &str = "embeddings.tsv";
pub const REPORT_FILE: &str = "eval_report.tsv";
pub const PER_USER_FILE: &str = "eval_per_user.tsv";
pub const ROC_FILE: &str = "eval_roc.tsv";
pub const SWEEP_FILE: &str = "sweep.tsv";

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train_cmd(a),
        Command::Embed(a) => embed(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Sweep(a) => sweep(a),
    }
}

fn out_dir(out: &OutDir) -> Result<&Path> {
    fs::create_dir_all(&out.out_dir).map_err(|e| Error::io(&out.out_dir, e))?;
    Ok(&out.out_dir)
}

fn write_manifest(dir: &Path, command: &str, body: serde_json::Value) -> Result<()> {
    let path = dir.join(format!("{command}_manifest.json"));
    let manifest = json!({
        "tool": "keydyn",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "run": body,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Configuration echo for the head of delimited reports.
fn preamble(command: &str, config: &impl Serialize) -> Vec<String> {
    vec![
        format!("keydyn {} {command}", env!("CARGO_PKG_VERSION")),
        format!("config {}", serde_json::to_string(config).expect("config serializes")),
    ]
}

fn load_dataset(path: &Path) -> Result<(UserCollection, serde_json::Value)> {
    let (users, report) = data::parse_dataset(path, &TextFormat::default())?;
    for r in report.rejected_rows.iter().take(10) {
        log::warn!("{}: line {}: {}", path.display(), r.line, r.reason);
    }
    let stats = json!({
        "path": path.display().to_string(),
        "users": users.num_users(),
        "sequences": users.num_sequences(),
        "accepted_rows": report.accepted_rows,
        "rejected_rows": report.rejected_rows.len(),
        "dropped_sequences": report.dropped_sequences,
    });
    Ok((users, stats))
}

fn load_model(path: &Path) -> Result<ModelCheckpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.config().feature_dim != FEATURE_DIM {
        return Err(Error::Incompatible(format!(
            "checkpoint expects {} input features, the pipeline produces {FEATURE_DIM}",
            ckpt.config().feature_dim
        )));
    }
    Ok(ckpt)
}

fn generate(a: GenerateArgs) -> Result<()> {
    let spec = SyntheticSpec {
        num_users: a.users,
        sequences_per_user: a.seqs,
        min_keys: a.min_keys,
        max_keys: a.max_keys,
        noise_scale: a.noise,
        seed: a.seed,
        ..Default::default()
    };
    let users = data::generate_synthetic(&spec)?;
    let dir = out_dir(&a.out)?;
    data::write_dataset(&users, &dir.join(DATASET_FILE), &TextFormat::default())?;
    write_manifest(
        dir,
        "generate",
        json!({
            "spec": spec,
            "seed": a.seed,
            "format": { "delimiter": "\t", "columns": data::ColumnMap::default() },
            "outputs": [DATASET_FILE],
        }),
    )
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let config = TrainConfig {
        epochs: a.epochs,
        batches_per_epoch: a.batches,
        batch_size: a.batch_size,
        batch_semantics: match a.batch_semantics {
            SemanticsArg::Pairs => BatchSemantics::Pairs,
            SemanticsArg::Sequences => BatchSemantics::Sequences,
        },
        hyper: TrainHyper {
            learning_rate: a.lr,
            margin: a.alpha,
            ..Default::default()
        },
        model: ModelConfig {
            input_length: a.m,
            lstm_units: a.units,
            inter_layer_dropout: a.dropout,
            lstm_dropout: a.lstm_dropout,
            ..Default::default()
        },
        seed: a.seed,
    };
    config.validate()?;
    let (users, stats) = load_dataset(&a.data)?;
    let (train_users, test_users) = data::split_users(&users, a.train_fraction, a.seed)?;
    let dir = out_dir(&a.out)?;
    let head = preamble("train", &config);
    write_split(&dir.join(SPLIT_FILE), &train_users, &test_users, &head)?;

    let (ckpt, log) = match train::train(&train_users, &config) {
        Ok(done) => done,
        Err(e) => {
            if let Some(last) = &e.last_good {
                save_checkpoint(last, &dir.join(PARTIAL_CHECKPOINT_FILE))?;
            }
            log::error!("{e}");
            return Err(e.into());
        }
    };
    save_checkpoint(&ckpt, &dir.join(CHECKPOINT_FILE))?;
    train::write_train_log(&log, &dir.join(TRAIN_LOG_FILE), &head)?;
    train::write_timing_log(&log, &dir.join(TIMING_FILE))?;
    write_manifest(
        dir,
        "train",
        json!({
            "config": config,
            "seed": a.seed,
            "train_fraction": a.train_fraction,
            "dataset": stats,
            "train_users": train_users.num_users(),
            "test_users": test_users.num_users(),
            "init": ckpt.init,
            "steps": ckpt.steps,
            "final_loss": log.last().map(|r| r.mean_loss),
            "outputs": [CHECKPOINT_FILE, TRAIN_LOG_FILE, TIMING_FILE, SPLIT_FILE],
        }),
    )
}

fn write_split(path: &Path, train: &UserCollection, test: &UserCollection, head: &[String]) -> Result<()> {
    let mut text = String::new();
    for line in head {
        text.push_str(&format!("# {line}\n"));
    }
    text.push_str("user_id\tpartition\n");
    for (set, name) in [(train, "train"), (test, "test")] {
        for id in set.user_ids() {
            text.push_str(&format!("{id}\t{name}\n"));
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Held-out user ids listed in a split file.
pub fn read_split_test_users(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    if lines.next() != Some("user_id\tpartition") {
        return Err(Error::Schema(format!("{}: missing split header", path.display())));
    }
    let mut ids = Vec::new();
    for line in lines {
        match line.split_once('\t') {
            Some((id, "test")) => ids.push(id.to_string()),
            Some((_, "train")) => {}
            _ => return Err(Error::Schema(format!("{}: bad split line {line:?}", path.display()))),
        }
    }
    Ok(ids)
}

fn embed(a: EmbedArgs) -> Result<()> {
    let ckpt = load_model(&a.checkpoint)?;
    let m = a.m.unwrap_or(ckpt.config().input_length);
    if m == 0 {
        return Err(Error::Config("--M must be >= 1".into()));
    }
    let (users, stats) = load_dataset(&a.data)?;
    let seqs: Vec<_> = users.iter().flat_map(|(_, s)| s.iter()).collect();
    let embedded = eval::embed_sequences(&ckpt.model, &seqs, m)?;
    for (i, e) in &embedded.failures {
        log::warn!("skipping {} {}: {e}", seqs[*i].user_id, seqs[*i].session_id);
    }
    let dir = out_dir(&a.out)?;
    let mut text = String::new();
    for line in preamble("embed", &json!({ "M": m, "model": ckpt.config() })) {
        text.push_str(&format!("# {line}\n"));
    }
    text.push_str("user_id\tsession_id");
    for j in 0..ckpt.config().embedding_dim() {
        text.push_str(&format!("\te{j}"));
    }
    text.push('\n');
    for (i, e) in embedded.indices.iter().zip(&embedded.embeddings) {
        text.push_str(&format!("{}\t{}", seqs[*i].user_id, seqs[*i].session_id));
        for v in e.as_slice() {
            text.push_str(&format!("\t{v}"));
        }
        text.push('\n');
    }
    let path = dir.join(EMBEDDINGS_FILE);
    fs::write(&path, text).map_err(|e| Error::io(path, e))?;
    write_manifest(
        dir,
        "embed",
        json!({
            "checkpoint": a.checkpoint.display().to_string(),
            "model": ckpt.config(),
            "M": m,
            "dataset": stats,
            "embedded": embedded.embeddings.len(),
            "failed": embedded.failures.len(),
            "outputs": [EMBEDDINGS_FILE],
        }),
    )
}

fn protocol_inputs(a: &ProtocolArgs) -> Result<(ModelCheckpoint, UserCollection, serde_json::Value)> {
    let ckpt = load_model(&a.checkpoint)?;
    let (users, stats) = load_dataset(&a.data)?;
    let users = match &a.split {
        None => users,
        Some(path) => {
            let ids = read_split_test_users(path)?;
            if let Some(missing) = ids.iter().find(|id| users.user(id).is_none()) {
                return Err(Error::Protocol(format!(
                    "split lists user {missing} which is not in {}",
                    a.data.display()
                )));
            }
            users.subset(ids.iter().map(String::as_str))
        }
    };
    Ok((ckpt, users, stats))
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let (ckpt, users, stats) = protocol_inputs(&a.common)?;
    let cfg = ProtocolConfig {
        m: a.m,
        g: a.g,
        k: a.k,
        test_sequences_per_user: a.common.test_seqs,
        seed: a.common.seed,
    };
    let report = eval::evaluate_with_roc(&ckpt.model, &users, &cfg, a.roc)?;
    log::info!("mean EER {:.4} (std {:.4}) over {} users", report.mean_eer, report.std_eer, report.per_user.len());
    let dir = out_dir(&a.common.out)?;
    let head = preamble("evaluate", &cfg);
    eval::write_report(&report, &dir.join(REPORT_FILE), &head)?;
    eval::write_per_user(&report, &dir.join(PER_USER_FILE))?;
    let mut outputs = vec![REPORT_FILE, PER_USER_FILE];
    if let Some(roc) = &report.roc {
        eval::write_roc(roc, &dir.join(ROC_FILE))?;
        outputs.push(ROC_FILE);
    }
    write_manifest(
        dir,
        "evaluate",
        json!({
            "protocol": cfg,
            "seed": cfg.seed,
            "checkpoint": a.common.checkpoint.display().to_string(),
            "model": ckpt.config(),
            "dataset": stats,
            "split": a.common.split.as_ref().map(|p| p.display().to_string()),
            "evaluated_users": users.num_users(),
            "total_scores": report.total_scores,
            "mean_EER": report.mean_eer,
            "std_EER": report.std_eer,
            "outputs": outputs,
        }),
    )
}

fn sweep(a: SweepArgs) -> Result<()> {
    let (ckpt, users, stats) = protocol_inputs(&a.common)?;
    if a.m.is_empty() || a.g.is_empty() || a.k.is_empty() {
        return Err(Error::Config("--M, --G and --K need at least one value each".into()));
    }
    let seed = a.common.seed;
    let cells = eval::sweep(&ckpt.model, &users, &a.m, &a.g, &a.k, seed, a.common.test_seqs)?;
    let dir = out_dir(&a.common.out)?;
    let grid = json!({
        "M": a.m,
        "G": a.g,
        "K": a.k,
        "test_sequences_per_user": a.common.test_seqs,
        "seed": seed,
    });
    eval::write_sweep(&cells, &dir.join(SWEEP_FILE), &preamble("sweep", &grid))?;
    write_manifest(
        dir,
        "sweep",
        json!({
            "grid": grid,
            "seed": seed,
            "checkpoint": a.common.checkpoint.display().to_string(),
            "model": ckpt.config(),
            "dataset": stats,
            "split": a.common.split.as_ref().map(|p| p.display().to_string()),
            "evaluated_users": users.num_users(),
            "cells": cells.len(),
            "outputs": [SWEEP_FILE],
        }),
    )
}
