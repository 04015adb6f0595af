//! Timing features, fixed-length padding and Siamese pair sampling.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{KeystrokeSequence, UserCollection};
use crate::error::{Error, Result};

/// Columns per keystroke: hold, inter-key, press and release latency, keycode.
pub const FEATURE_DIM: usize = 5;

/// One keystroke's features. Latencies are in seconds; `key` is keycode / 255.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub hl: f64,
    pub il: f64,
    pub pl: f64,
    pub rl: f64,
    pub key: f64,
}

impl FeatureVector {
    pub fn to_array(self) -> [f64; FEATURE_DIM] {
        [self.hl, self.il, self.pl, self.rl, self.key]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub user_id: String,
    pub rows: Vec<FeatureVector>,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub fn normalize_keycode(code: u32) -> Result<f64> {
    if code > 255 {
        return Err(Error::Domain(format!("keycode {code} outside 0-255")));
    }
    Ok(code as f64 / 255.0)
}

/// Row `i` pairs the hold time of key `i` with the transition from key `i` to
/// key `i + 1`; the last row has no transition and its IL/PL/RL are zero.
/// Inter-key latency goes negative when the next key is pressed before the
/// current one is released.
pub fn extract_features(seq: &KeystrokeSequence) -> Result<FeatureSequence> {
    let ev = &seq.events;
    if ev.len() < 2 {
        return Err(Error::TooShort { len: ev.len() });
    }
    const MS: f64 = 1000.0;
    let rows = ev
        .iter()
        .enumerate()
        .map(|(i, cur)| {
            let hl = (cur.release_time - cur.press_time) / MS;
            let key = cur.keycode as f64 / 255.0;
            match ev.get(i + 1) {
                Some(next) => FeatureVector {
                    hl,
                    il: (next.press_time - cur.release_time) / MS,
                    pl: (next.press_time - cur.press_time) / MS,
                    rl: (next.release_time - cur.release_time) / MS,
                    key,
                },
                None => FeatureVector {
                    hl,
                    il: 0.0,
                    pl: 0.0,
                    rl: 0.0,
                    key,
                },
            }
        })
        .collect();
    Ok(FeatureSequence {
        user_id: seq.user_id.clone(),
        rows,
    })
}

/// A sequence cut or zero-padded to exactly `len()` rows, with its validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedInput {
    /// `M x 5`; rows past `valid_len()` are zero.
    pub matrix: Array2<f64>,
    pub mask: Vec<bool>,
    pub original_length: usize,
}

impl PaddedInput {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Number of leading rows holding real keystrokes.
    pub fn valid_len(&self) -> usize {
        self.original_length.min(self.mask.len())
    }
}

pub fn pad_truncate(features: &FeatureSequence, m: usize) -> Result<PaddedInput> {
    if m == 0 {
        return Err(Error::Config("input length M must be at least 1".into()));
    }
    let n = features.len();
    let keep = n.min(m);
    let mut matrix = Array2::zeros((m, FEATURE_DIM));
    for (i, row) in features.rows.iter().take(keep).enumerate() {
        for (j, v) in row.to_array().into_iter().enumerate() {
            matrix[[i, j]] = v;
        }
    }
    let mask = (0..m).map(|i| i < keep).collect();
    Ok(PaddedInput {
        matrix,
        mask,
        original_length: n,
    })
}

/// Feature extraction followed by padding/truncation to `m` rows.
pub fn prepare(seq: &KeystrokeSequence, m: usize) -> Result<PaddedInput> {
    pad_truncate(&extract_features(seq)?, m)
}

/// Writes feature rows as delimited text, one row per keystroke.
pub fn write_features(seqs: &[FeatureSequence], path: &Path, delimiter: u8) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let d = delimiter as char;
    let mut write = || -> std::io::Result<()> {
        writeln!(out, "user_id{d}seq{d}row{d}hl{d}il{d}pl{d}rl{d}key")?;
        for (s, seq) in seqs.iter().enumerate() {
            for (i, r) in seq.rows.iter().enumerate() {
                writeln!(
                    out,
                    "{}{d}{s}{d}{i}{d}{}{d}{}{d}{}{d}{}{d}{}",
                    seq.user_id, r.hl, r.il, r.pl, r.rl, r.key
                )?;
            }
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairLabel {
    Genuine = 0,
    Impostor = 1,
}

impl PairLabel {
    pub fn as_f64(self) -> f64 {
        self as u8 as f64
    }
}

/// Which stored sequences a pair was drawn from: `(user index, sequence index)`.
pub type PairSource = ((usize, usize), (usize, usize));

#[derive(Debug, Clone)]
pub struct PairBatch {
    pub left: Vec<PaddedInput>,
    pub right: Vec<PaddedInput>,
    pub labels: Vec<PairLabel>,
    pub sources: Vec<PairSource>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Training users with every sequence already converted to model input.
pub struct PairPool {
    user_ids: Vec<String>,
    inputs: Vec<Vec<PaddedInput>>,
}

impl PairPool {
    /// Requires at least two users with at least two sequences each; any
    /// sequence that fails feature extraction is an error.
    pub fn new(users: &UserCollection, m: usize) -> Result<Self> {
        let mut user_ids = Vec::new();
        let mut inputs = Vec::new();
        for (id, seqs) in users.iter() {
            if seqs.len() < 2 {
                return Err(Error::Protocol(format!(
                    "user {id} has {} sequence(s); pair sampling needs at least 2",
                    seqs.len()
                )));
            }
            let padded = seqs
                .iter()
                .map(|s| prepare(s, m))
                .collect::<Result<Vec<_>>>()?;
            user_ids.push(id.to_string());
            inputs.push(padded);
        }
        if user_ids.len() < 2 {
            return Err(Error::Protocol(format!(
                "pair sampling needs at least 2 users, got {}",
                user_ids.len()
            )));
        }
        Ok(Self { user_ids, inputs })
    }

    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn user_id(&self, index: usize) -> &str {
        &self.user_ids[index]
    }

    pub fn input(&self, user: usize, seq: usize) -> &PaddedInput {
        &self.inputs[user][seq]
    }

    /// Number of distinct unordered genuine pairs available for `user`.
    pub fn genuine_pairs(&self, user: usize) -> usize {
        let n = self.inputs[user].len();
        n * (n - 1) / 2
    }

    /// Draws `ceil(batch_size / 2)` genuine pairs followed by
    /// `floor(batch_size / 2)` impostor pairs.
    ///
    /// Genuine: a uniform user and two distinct uniform sequences of it.
    /// Impostor: two distinct uniform users and one uniform sequence of each.
    pub fn sample(&self, batch_size: usize, rng: &mut impl Rng) -> Result<PairBatch> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let n_genuine = batch_size.div_ceil(2);
        let n_users = self.user_ids.len();
        let mut batch = PairBatch {
            left: Vec::with_capacity(batch_size),
            right: Vec::with_capacity(batch_size),
            labels: Vec::with_capacity(batch_size),
            sources: Vec::with_capacity(batch_size),
        };
        for k in 0..batch_size {
            let (a, b, label) = if k < n_genuine {
                let u = rng.random_range(0..n_users);
                let n = self.inputs[u].len();
                let i = rng.random_range(0..n);
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                ((u, i), (u, j), PairLabel::Genuine)
            } else {
                let u = rng.random_range(0..n_users);
                let mut v = rng.random_range(0..n_users - 1);
                if v >= u {
                    v += 1;
                }
                let i = rng.random_range(0..self.inputs[u].len());
                let j = rng.random_range(0..self.inputs[v].len());
                ((u, i), (v, j), PairLabel::Impostor)
            };
            batch.left.push(self.input(a.0, a.1).clone());
            batch.right.push(self.input(b.0, b.1).clone());
            batch.labels.push(label);
            batch.sources.push((a, b));
        }
        Ok(batch)
    }
}

/// One-off convenience over [`PairPool`]; training reuses a pool instead.
pub fn sample_pair_batch(
    train_users: &UserCollection,
    batch_size: usize,
    m: usize,
    rng: &mut impl Rng,
) -> Result<PairBatch> {
    PairPool::new(train_users, m)?.sample(batch_size, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, KeystrokeEvent, SyntheticSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(events: &[(u8, f64, f64)]) -> KeystrokeSequence {
        KeystrokeSequence {
            user_id: "u".into(),
            session_id: "s".into(),
            events: events
                .iter()
                .map(|&(k, p, r)| KeystrokeEvent::new(k, p, r).unwrap())
                .collect(),
        }
    }

    #[test]
    fn two_key_example() {
        let f = extract_features(&seq(&[(65, 1000.0, 1100.0), (66, 1250.0, 1380.0)])).unwrap();
        let r = f.rows[0];
        assert!((r.hl - 0.100).abs() < 1e-12);
        assert!((r.il - 0.150).abs() < 1e-12);
        assert!((r.pl - 0.250).abs() < 1e-12);
        assert!((r.rl - 0.280).abs() < 1e-12);
        assert_eq!(r.key, 65.0 / 255.0);
        let last = f.rows[1];
        assert!((last.hl - 0.130).abs() < 1e-12);
        assert_eq!((last.il, last.pl, last.rl), (0.0, 0.0, 0.0));
    }

    #[test]
    fn rollover_keeps_negative_interkey() {
        let f = extract_features(&seq(&[(65, 1000.0, 1100.0), (66, 1050.0, 1200.0)])).unwrap();
        assert!((f.rows[0].il + 0.050).abs() < 1e-12);
    }

    #[test]
    fn too_short() {
        assert!(matches!(
            extract_features(&seq(&[(65, 0.0, 1.0)])),
            Err(Error::TooShort { len: 1 })
        ));
    }

    #[test]
    fn keycode_normalization() {
        assert_eq!(normalize_keycode(0).unwrap(), 0.0);
        assert_eq!(normalize_keycode(255).unwrap(), 1.0);
        assert_eq!(normalize_keycode(65).unwrap(), 65.0 / 255.0);
        assert!(matches!(normalize_keycode(256), Err(Error::Domain(_))));
    }

    fn features_of_len(n: usize) -> FeatureSequence {
        let events: Vec<_> = (0..n)
            .map(|i| (65 + i as u8, 100.0 * i as f64, 100.0 * i as f64 + 40.0))
            .collect();
        extract_features(&seq(&events)).unwrap()
    }

    #[test]
    fn padding() {
        let p = pad_truncate(&features_of_len(3), 5).unwrap();
        assert_eq!(p.mask, vec![true, true, true, false, false]);
        assert!(p.matrix.row(3).iter().chain(p.matrix.row(4).iter()).all(|&v| v == 0.0));
        assert_eq!(p.valid_len(), 3);
    }

    #[test]
    fn truncation_keeps_head() {
        let f = features_of_len(7);
        let p = pad_truncate(&f, 5).unwrap();
        assert!(p.mask.iter().all(|&m| m));
        for i in 0..5 {
            assert_eq!(p.matrix.row(i).to_vec(), f.rows[i].to_array().to_vec());
        }
        assert_eq!(p.original_length, 7);
    }

    #[test]
    fn exact_length_is_identity() {
        let f = features_of_len(5);
        let p = pad_truncate(&f, 5).unwrap();
        assert!(p.mask.iter().all(|&m| m));
        let rows: Vec<Vec<f64>> = f.rows.iter().map(|r| r.to_array().to_vec()).collect();
        let got: Vec<Vec<f64>> = p.matrix.rows().into_iter().map(|r| r.to_vec()).collect();
        assert_eq!(rows, got);
    }

    #[test]
    fn zero_length_rejected() {
        assert!(pad_truncate(&features_of_len(3), 0).is_err());
    }

    fn population(users: usize, seqs: usize) -> UserCollection {
        generate_synthetic(&SyntheticSpec {
            num_users: users,
            sequences_per_user: seqs,
            min_keys: 5,
            max_keys: 9,
            seed: 11,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn batch_is_balanced_and_labels_are_correct() {
        let pool = PairPool::new(&population(6, 4), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = pool.sample(512, &mut rng).unwrap();
        let genuine = batch.labels.iter().filter(|&&l| l == PairLabel::Genuine).count();
        assert_eq!(genuine, 256);
        assert_eq!(batch.len(), 512);
        for (label, ((ua, sa), (ub, sb))) in batch.labels.iter().zip(&batch.sources) {
            match label {
                PairLabel::Genuine => {
                    assert_eq!(ua, ub);
                    assert_ne!(sa, sb);
                }
                PairLabel::Impostor => assert_ne!(pool.user_id(*ua), pool.user_id(*ub)),
            }
        }
        let odd = pool.sample(7, &mut rng).unwrap();
        let g = odd.labels.iter().filter(|&&l| l == PairLabel::Genuine).count();
        assert_eq!((g, 7 - g), (4, 3));
    }

    #[test]
    fn sampling_is_deterministic() {
        let pool = PairPool::new(&population(4, 3), 6).unwrap();
        let a = pool.sample(16, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = pool.sample(16, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.sources, b.sources);
        assert_eq!(a.left, b.left);
    }

    #[test]
    fn genuine_universe_with_fifteen_sessions() {
        let pool = PairPool::new(&population(2, 15), 4).unwrap();
        assert_eq!(pool.genuine_pairs(0), 105);
    }

    #[test]
    fn sampler_preconditions() {
        assert!(matches!(PairPool::new(&population(1, 4), 4), Err(Error::Protocol(_))));
        assert!(matches!(PairPool::new(&population(3, 1), 4), Err(Error::Protocol(_))));
    }
}
