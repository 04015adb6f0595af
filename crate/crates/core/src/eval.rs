//! Verification protocol: enrollment galleries, gallery-averaged distance
//! scores, per-user equal error rate and parameter sweeps.
//!
//! Scores are distances, so a query is accepted when `score <= threshold`
//! (ties accept).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{KeystrokeSequence, UserCollection};
use crate::error::{Error, Result};
use crate::features::{self, PaddedInput};
use crate::nn::{Embedding, Model};
use crate::seed::{self, Stream};

/// Sequences per inference batch.
const EMBED_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    /// Keystrokes per sequence (M).
    #[serde(rename = "M")]
    pub m: usize,
    /// Enrollment sequences per user (G).
    #[serde(rename = "G")]
    pub g: usize,
    /// Enrolled users (K).
    #[serde(rename = "K")]
    pub k: usize,
    /// Trailing sessions per user held out as genuine queries.
    pub test_sequences_per_user: usize,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            m: 50,
            g: 5,
            k: 100,
            test_sequences_per_user: 5,
            seed: 0,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=10).contains(&self.g) {
            return Err(Error::Config(format!("G = {} outside 1..=10", self.g)));
        }
        if self.k < 2 {
            return Err(Error::Config(format!("K = {} must be at least 2", self.k)));
        }
        if self.m == 0 || self.test_sequences_per_user == 0 {
            return Err(Error::Config("M and test sequences per user must be >= 1".into()));
        }
        Ok(())
    }
}

/// Sequence roles for one enrolled user. Users are referred to by their
/// position in the collection's user order; sequences by session position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserAssignment {
    pub user: usize,
    pub user_id: String,
    pub gallery: Vec<usize>,
    pub genuine: Vec<usize>,
    /// One `(user, sequence)` query from every other enrolled user.
    pub impostors: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Protocol {
    pub config: ProtocolConfig,
    pub assignments: Vec<UserAssignment>,
}

impl Protocol {
    pub fn total_scores(&self) -> usize {
        self.assignments
            .iter()
            .map(|a| a.genuine.len() + a.impostors.len())
            .sum()
    }

    /// Every `(user, sequence)` the protocol needs an embedding for.
    pub fn required_sequences(&self) -> Vec<(usize, usize)> {
        let mut need: Vec<(usize, usize)> = self
            .assignments
            .iter()
            .flat_map(|a| {
                a.gallery
                    .iter()
                    .chain(&a.genuine)
                    .map(move |&s| (a.user, s))
                    .chain(a.impostors.iter().copied())
            })
            .collect();
        need.sort_unstable();
        need.dedup();
        need
    }
}

/// Assigns galleries and queries.
///
/// Eligible users have at least `G + test_sequences_per_user` sequences of at
/// least two keystrokes. `K` of them are drawn uniformly (all of them when
/// exactly `K` qualify). For each enrolled user the last
/// `test_sequences_per_user` sessions are the genuine queries, the gallery is
/// `G` sessions drawn without replacement from the rest, and one held-out
/// session of every other enrolled user is drawn as an impostor query.
pub fn build_protocol(test_users: &UserCollection, cfg: &ProtocolConfig) -> Result<Protocol> {
    cfg.validate()?;
    let t = cfg.test_sequences_per_user;
    let sizes: Vec<usize> = test_users.iter().map(|(_, s)| s.len()).collect();
    let ids: Vec<&str> = test_users.user_ids().collect();
    let eligible: Vec<usize> = test_users
        .iter()
        .enumerate()
        .filter(|(_, (_, seqs))| seqs.len() >= cfg.g + t && seqs.iter().all(|s| s.len() >= 2))
        .map(|(i, _)| i)
        .collect();
    if eligible.len() < cfg.k {
        return Err(Error::Protocol(format!(
            "K = {} enrolled users requested but only {} users have >= {} usable sequences",
            cfg.k,
            eligible.len(),
            cfg.g + t
        )));
    }
    let mut rng = seed::rng(cfg.seed, Stream::Protocol);
    let mut chosen: Vec<usize> = if eligible.len() == cfg.k {
        eligible
    } else {
        index::sample(&mut rng, eligible.len(), cfg.k)
            .into_iter()
            .map(|i| eligible[i])
            .collect()
    };
    chosen.sort_unstable();

    let mut assignments = Vec::with_capacity(cfg.k);
    for &u in &chosen {
        let n = sizes[u];
        let non_test = n - t;
        let mut gallery: Vec<usize> = if cfg.g == non_test {
            (0..non_test).collect()
        } else {
            index::sample(&mut rng, non_test, cfg.g).into_vec()
        };
        gallery.sort_unstable();
        let impostors = chosen
            .iter()
            .filter(|&&v| v != u)
            .map(|&v| (v, sizes[v] - t + rng.random_range(0..t)))
            .collect();
        assignments.push(UserAssignment {
            user: u,
            user_id: ids[u].to_string(),
            gallery,
            genuine: (non_test..n).collect(),
            impostors,
        });
    }
    Ok(Protocol {
        config: cfg.clone(),
        assignments,
    })
}

/// Embeddings for a list of sequences, in input order, minus those that
/// could not be embedded.
#[derive(Debug)]
pub struct Embedded {
    pub embeddings: Vec<Embedding>,
    /// Input position of each entry of `embeddings`.
    pub indices: Vec<usize>,
    pub failures: Vec<(usize, Error)>,
}

/// Feature extraction plus inference-mode forward pass for every sequence.
pub fn embed_sequences(model: &Model, seqs: &[&KeystrokeSequence], m: usize) -> Result<Embedded> {
    let mut inputs: Vec<(usize, PaddedInput)> = Vec::with_capacity(seqs.len());
    let mut failures = Vec::new();
    for (i, s) in seqs.iter().enumerate() {
        match features::prepare(s, m) {
            Ok(p) => inputs.push((i, p)),
            Err(e) => failures.push((i, e)),
        }
    }
    let chunks: Vec<Vec<Embedding>> = inputs
        .par_chunks(EMBED_CHUNK)
        .map(|chunk| {
            let refs: Vec<&PaddedInput> = chunk.iter().map(|(_, p)| p).collect();
            model.embed_batch(&refs)
        })
        .collect::<Result<_>>()?;
    Ok(Embedded {
        embeddings: chunks.into_iter().flatten().collect(),
        indices: inputs.iter().map(|(i, _)| *i).collect(),
        failures,
    })
}

/// Mean Euclidean distance between the query and each gallery embedding.
pub fn verification_score(gallery: &[Embedding], query: &Embedding) -> Result<f64> {
    if gallery.is_empty() {
        return Err(Error::Protocol("empty gallery".into()));
    }
    let mut total = 0.0;
    for g in gallery {
        total += crate::nn::euclidean_distance(g, query)?;
    }
    Ok(total / gallery.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserScoreSet {
    pub user_id: String,
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

/// Equal error rate of one score set.
///
/// Operating points are taken at `-inf` and at every distinct score. The EER
/// is the FAR at the first point where FAR >= FRR, linearly interpolated from
/// the previous point when the two rates cross strictly between points.
pub fn compute_user_eer(scores: &UserScoreSet) -> Result<f64> {
    eer(&scores.genuine, &scores.impostor)
}

pub fn eer(genuine: &[f64], impostor: &[f64]) -> Result<f64> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::Protocol("EER needs at least one genuine and one impostor score".into()));
    }
    if genuine.iter().chain(impostor).any(|s| s.is_nan()) {
        return Err(Error::Domain("NaN score".into()));
    }
    let mut pooled: Vec<(f64, bool)> = genuine
        .iter()
        .map(|&s| (s, false))
        .chain(impostor.iter().map(|&s| (s, true)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (n_gen, n_imp) = (genuine.len() as f64, impostor.len() as f64);
    let (mut acc_gen, mut acc_imp) = (0usize, 0usize);
    let (mut prev_far, mut prev_frr) = (0.0, 1.0);
    let mut i = 0;
    while i < pooled.len() {
        let tau = pooled[i].0;
        while i < pooled.len() && pooled[i].0 == tau {
            if pooled[i].1 {
                acc_imp += 1;
            } else {
                acc_gen += 1;
            }
            i += 1;
        }
        let far = acc_imp as f64 / n_imp;
        let frr = (genuine.len() - acc_gen) as f64 / n_gen;
        if far >= frr {
            if far == frr {
                return Ok(far);
            }
            let d0 = prev_far - prev_frr;
            let d1 = far - frr;
            let lambda = -d0 / (d1 - d0);
            return Ok(prev_far + lambda * (far - prev_far));
        }
        prev_far = far;
        prev_frr = frr;
    }
    unreachable!("FAR reaches 1 and FRR reaches 0 at the largest score")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Pooled operating points at every distinct score.
pub fn roc_points(sets: &[UserScoreSet]) -> Vec<RocPoint> {
    let mut pooled: Vec<(f64, bool)> = sets
        .iter()
        .flat_map(|s| {
            s.genuine
                .iter()
                .map(|&v| (v, false))
                .chain(s.impostor.iter().map(|&v| (v, true)))
        })
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n_gen = pooled.iter().filter(|p| !p.1).count().max(1) as f64;
    let n_imp = pooled.iter().filter(|p| p.1).count().max(1) as f64;
    let (mut acc_gen, mut acc_imp) = (0usize, 0usize);
    let mut out = Vec::new();
    let mut i = 0;
    while i < pooled.len() {
        let tau = pooled[i].0;
        while i < pooled.len() && pooled[i].0 == tau {
            if pooled[i].1 {
                acc_imp += 1;
            } else {
                acc_gen += 1;
            }
            i += 1;
        }
        out.push(RocPoint {
            threshold: tau,
            far: acc_imp as f64 / n_imp,
            frr: 1.0 - acc_gen as f64 / n_gen,
        });
    }
    out
}

/// Embeddings keyed by `(user position, session position)`.
pub type EmbeddingTable = HashMap<(usize, usize), Embedding>;

/// Embeds the listed sequences at length `m`. Sequences that cannot be
/// embedded are a protocol error, since the protocol already requires them.
pub fn embed_table(
    model: &Model,
    users: &UserCollection,
    wanted: &[(usize, usize)],
    m: usize,
) -> Result<EmbeddingTable> {
    let per_user: Vec<&[KeystrokeSequence]> = users.iter().map(|(_, s)| s).collect();
    let seqs: Vec<&KeystrokeSequence> = wanted.iter().map(|&(u, s)| &per_user[u][s]).collect();
    let embedded = embed_sequences(model, &seqs, m)?;
    if let Some((i, e)) = embedded.failures.into_iter().next() {
        let (u, s) = wanted[i];
        return Err(Error::Protocol(format!("cannot embed user {u} session {s}: {e}")));
    }
    Ok(embedded
        .indices
        .into_iter()
        .zip(embedded.embeddings)
        .map(|(i, e)| (wanted[i], e))
        .collect())
}

/// Genuine and impostor scores of every enrolled user.
pub fn score_protocol(protocol: &Protocol, table: &EmbeddingTable) -> Result<Vec<UserScoreSet>> {
    let get = |key: (usize, usize)| {
        table
            .get(&key)
            .ok_or_else(|| Error::Protocol(format!("missing embedding for {key:?}")))
    };
    protocol
        .assignments
        .par_iter()
        .map(|a| {
            let gallery: Vec<Embedding> = a
                .gallery
                .iter()
                .map(|&s| get((a.user, s)).cloned())
                .collect::<Result<_>>()?;
            let score = |key| -> Result<f64> { verification_score(&gallery, get(key)?) };
            Ok(UserScoreSet {
                user_id: a.user_id.clone(),
                genuine: a.genuine.iter().map(|&s| score((a.user, s))).collect::<Result<_>>()?,
                impostor: a.impostors.iter().map(|&k| score(k)).collect::<Result<_>>()?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub config: ProtocolConfig,
    pub per_user: Vec<(String, f64)>,
    pub mean_eer: f64,
    /// Population standard deviation of the per-user EERs.
    pub std_eer: f64,
    pub total_scores: usize,
    pub roc: Option<Vec<RocPoint>>,
}

pub fn summarize(config: &ProtocolConfig, sets: &[UserScoreSet], with_roc: bool) -> Result<EvalReport> {
    let per_user: Vec<(String, f64)> = sets
        .iter()
        .map(|s| Ok((s.user_id.clone(), compute_user_eer(s)?)))
        .collect::<Result<_>>()?;
    let n = per_user.len() as f64;
    let mean_eer = per_user.iter().map(|(_, e)| e).sum::<f64>() / n;
    let std_eer = (per_user.iter().map(|(_, e)| (e - mean_eer).powi(2)).sum::<f64>() / n).sqrt();
    Ok(EvalReport {
        config: config.clone(),
        per_user,
        mean_eer,
        std_eer,
        total_scores: sets.iter().map(|s| s.genuine.len() + s.impostor.len()).sum(),
        roc: with_roc.then(|| roc_points(sets)),
    })
}

/// Protocol and score sets for one configuration.
pub fn score_sets(
    model: &Model,
    test_users: &UserCollection,
    cfg: &ProtocolConfig,
) -> Result<(Protocol, Vec<UserScoreSet>)> {
    let protocol = build_protocol(test_users, cfg)?;
    let table = embed_table(model, test_users, &protocol.required_sequences(), cfg.m)?;
    let sets = score_protocol(&protocol, &table)?;
    Ok((protocol, sets))
}

/// Embed, assign, score and average per-user EERs.
pub fn evaluate(model: &Model, test_users: &UserCollection, cfg: &ProtocolConfig) -> Result<EvalReport> {
    evaluate_with_roc(model, test_users, cfg, false)
}

pub fn evaluate_with_roc(
    model: &Model,
    test_users: &UserCollection,
    cfg: &ProtocolConfig,
    with_roc: bool,
) -> Result<EvalReport> {
    let (_, sets) = score_sets(model, test_users, cfg)?;
    summarize(cfg, &sets, with_roc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub m: usize,
    pub g: usize,
    pub k: usize,
    pub mean_eer: f64,
    pub std_eer: f64,
    pub seed: u64,
}

/// One evaluation per `(M, G, K)` cell. Embeddings are computed once per `M`
/// and shared by that row's cells.
pub fn sweep(
    model: &Model,
    test_users: &UserCollection,
    m_list: &[usize],
    g_list: &[usize],
    k_list: &[usize],
    seed: u64,
    test_sequences_per_user: usize,
) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::with_capacity(m_list.len() * g_list.len() * k_list.len());
    for &m in m_list {
        let mut protocols = Vec::new();
        for &g in g_list {
            for &k in k_list {
                let cfg = ProtocolConfig {
                    m,
                    g,
                    k,
                    test_sequences_per_user,
                    seed,
                };
                protocols.push(build_protocol(test_users, &cfg)?);
            }
        }
        let mut wanted: Vec<(usize, usize)> =
            protocols.iter().flat_map(|p| p.required_sequences()).collect();
        wanted.sort_unstable();
        wanted.dedup();
        let table = embed_table(model, test_users, &wanted, m)?;
        for p in &protocols {
            let report = summarize(&p.config, &score_protocol(p, &table)?, false)?;
            cells.push(SweepCell {
                m,
                g: p.config.g,
                k: p.config.k,
                mean_eer: report.mean_eer,
                std_eer: report.std_eer,
                seed,
            });
        }
    }
    Ok(cells)
}

fn write_lines(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    f(&mut out).and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

fn write_preamble(out: &mut impl Write, preamble: &[String]) -> std::io::Result<()> {
    for line in preamble {
        writeln!(out, "# {line}")?;
    }
    Ok(())
}

pub const TABLE_HEADER: &str = "M\tG\tK\tmean_EER\tstd_EER\tseed";

pub fn write_report(report: &EvalReport, path: &Path, preamble: &[String]) -> Result<()> {
    let c = &report.config;
    write_lines(path, |out| {
        write_preamble(out, preamble)?;
        writeln!(out, "{TABLE_HEADER}")?;
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            c.m, c.g, c.k, report.mean_eer, report.std_eer, c.seed
        )
    })
}

pub fn write_per_user(report: &EvalReport, path: &Path) -> Result<()> {
    write_lines(path, |out| {
        writeln!(out, "user_id\tEER")?;
        for (id, e) in &report.per_user {
            writeln!(out, "{id}\t{e}")?;
        }
        Ok(())
    })
}

pub fn write_roc(points: &[RocPoint], path: &Path) -> Result<()> {
    write_lines(path, |out| {
        writeln!(out, "threshold\tFAR\tFRR")?;
        for p in points {
            writeln!(out, "{}\t{}\t{}", p.threshold, p.far, p.frr)?;
        }
        Ok(())
    })
}

pub fn write_sweep(cells: &[SweepCell], path: &Path, preamble: &[String]) -> Result<()> {
    write_lines(path, |out| {
        write_preamble(out, preamble)?;
        writeln!(out, "{TABLE_HEADER}")?;
        for c in cells {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                c.m, c.g, c.k, c.mean_eer, c.std_eer, c.seed
            )?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(genuine: &[f64], impostor: &[f64]) -> UserScoreSet {
        UserScoreSet {
            user_id: "u".into(),
            genuine: genuine.to_vec(),
            impostor: impostor.to_vec(),
        }
    }

    #[test]
    fn perfect_separation() {
        assert_eq!(compute_user_eer(&set(&[0.1, 0.2], &[0.8, 0.9])).unwrap(), 0.0);
    }

    #[test]
    fn identical_multisets() {
        assert_eq!(compute_user_eer(&set(&[0.3, 0.7], &[0.3, 0.7])).unwrap(), 0.5);
        assert_eq!(compute_user_eer(&set(&[0.1, 0.2, 0.9], &[0.9, 0.1, 0.2])).unwrap(), 0.5);
    }

    #[test]
    fn interleaved() {
        // points: (0,1) (0,.5) (.5,.5) -> crossing exactly at 0.5? no:
        // tau=0.1 -> far 0, frr .5; tau=0.2 -> far .5, frr .5
        assert_eq!(compute_user_eer(&set(&[0.1, 0.3], &[0.2, 0.4])).unwrap(), 0.5);
    }

    #[test]
    fn tie_between_worst_genuine_and_best_impostor_is_not_zero() {
        let e = compute_user_eer(&set(&[0.1, 0.5], &[0.5, 0.9])).unwrap();
        assert!(e > 0.0);
    }

    #[test]
    fn empty_scores_rejected() {
        assert!(matches!(compute_user_eer(&set(&[], &[1.0])), Err(Error::Protocol(_))));
        assert!(matches!(compute_user_eer(&set(&[1.0], &[])), Err(Error::Protocol(_))));
    }

    #[test]
    fn score_is_mean_distance() {
        let a = Embedding(vec![0.0, 0.0]);
        let b = Embedding(vec![3.0, 4.0]);
        assert_eq!(verification_score(std::slice::from_ref(&a), &b).unwrap(), 5.0);
        assert_eq!(verification_score(&[a.clone(), b.clone()], &b).unwrap(), 2.5);
        assert_eq!(verification_score(&[b.clone(), b.clone()], &b).unwrap(), 0.0);
        assert!(matches!(verification_score(&[], &b), Err(Error::Protocol(_))));
    }

    #[test]
    fn protocol_config_bounds() {
        for (g, k) in [(0, 10), (11, 10), (5, 1)] {
            let cfg = ProtocolConfig { g, k, ..Default::default() };
            assert!(cfg.validate().is_err());
        }
    }
}
