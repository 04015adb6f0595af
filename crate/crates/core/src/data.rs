//! Keystroke logs: loading, synthetic populations and user-disjoint splits.
//!
//! The on-disk layout is one keystroke per row of a delimited text file with a
//! header row. Column names are configurable through [`ColumnMap`]; the
//! default is
//!
//! ```text
//! user_id  session_id  keycode  press_time  release_time
//! ```
//!
//! Times are milliseconds, integer or decimal. Sessions keep the order in which
//! they first appear in the file; that order is the "session order" used by the
//! evaluation protocol.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeystrokeEvent {
    pub keycode: u8,
    /// Milliseconds.
    pub press_time: f64,
    /// Milliseconds, never before `press_time`.
    pub release_time: f64,
}

impl KeystrokeEvent {
    pub fn new(keycode: u8, press_time: f64, release_time: f64) -> Result<Self> {
        if !press_time.is_finite() || !release_time.is_finite() {
            return Err(Error::Domain("non-finite timestamp".into()));
        }
        if release_time < press_time {
            return Err(Error::Domain(format!(
                "release {release_time} before press {press_time}"
            )));
        }
        Ok(Self {
            keycode,
            press_time,
            release_time,
        })
    }

    pub fn hold_ms(&self) -> f64 {
        self.release_time - self.press_time
    }
}

/// One typing session of one user, ordered by press time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeystrokeSequence {
    pub user_id: String,
    pub session_id: String,
    pub events: Vec<KeystrokeEvent>,
}

impl KeystrokeSequence {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Sequences grouped by user. Users iterate in id order; each user's sequences
/// stay in session order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UserCollection {
    users: BTreeMap<String, Vec<KeystrokeSequence>>,
}

impl UserCollection {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_user(&mut self, user_id: impl Into<String>, seqs: Vec<KeystrokeSequence>) {
        self.users.insert(user_id.into(), seqs);
    }

    pub fn user(&self, user_id: &str) -> Option<&[KeystrokeSequence]> {
        self.users.get(user_id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[KeystrokeSequence])> {
        self.users.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn user_ids(&self) -> impl Iterator<Item = &str> {
        self.users.keys().map(String::as_str)
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_sequences(&self) -> usize {
        self.users.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Keeps only the listed users (unknown ids are ignored).
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Self {
        let mut out = Self::new();
        for id in ids {
            if let Some(seqs) = self.users.get(id) {
                out.users.insert(id.to_string(), seqs.clone());
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub user_id: String,
    pub session_id: String,
    pub keycode: String,
    pub press_time: String,
    pub release_time: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            user_id: "user_id".into(),
            session_id: "session_id".into(),
            keycode: "keycode".into(),
            press_time: "press_time".into(),
            release_time: "release_time".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextFormat {
    pub delimiter: u8,
    pub columns: ColumnMap,
}

impl Default for TextFormat {
    fn default() -> Self {
        Self {
            delimiter: b'\t',
            columns: ColumnMap::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowRejection {
    /// 1-based line number in the file (the header is line 1).
    pub line: u64,
    pub reason: String,
}

/// What `parse_dataset` discarded.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseReport {
    pub accepted_rows: usize,
    pub rejected_rows: Vec<RowRejection>,
    /// Sessions left with fewer than two valid keystrokes.
    pub dropped_sequences: usize,
}

impl ParseReport {
    pub fn rejected_count(&self) -> usize {
        self.rejected_rows.len()
    }
}

struct ColumnIndex {
    user: usize,
    session: usize,
    keycode: usize,
    press: usize,
    release: usize,
}

impl ColumnIndex {
    fn resolve(headers: &csv::StringRecord, map: &ColumnMap) -> Result<Self> {
        let find = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
        };
        Ok(Self {
            user: find(&map.user_id)?,
            session: find(&map.session_id)?,
            keycode: find(&map.keycode)?,
            press: find(&map.press_time)?,
            release: find(&map.release_time)?,
        })
    }
}

fn parse_row(
    record: &csv::StringRecord,
    cols: &ColumnIndex,
) -> std::result::Result<(String, String, KeystrokeEvent), String> {
    let field = |i: usize| {
        record
            .get(i)
            .map(str::trim)
            .ok_or_else(|| format!("row has {} fields", record.len()))
    };
    let user = field(cols.user)?;
    let session = field(cols.session)?;
    if user.is_empty() || session.is_empty() {
        return Err("empty user or session id".into());
    }
    let code: i64 = field(cols.keycode)?
        .parse()
        .map_err(|e| format!("bad keycode: {e}"))?;
    if !(0..=255).contains(&code) {
        return Err(format!("keycode {code} outside 0-255"));
    }
    let press: f64 = field(cols.press)?
        .parse()
        .map_err(|e| format!("bad press time: {e}"))?;
    let release: f64 = field(cols.release)?
        .parse()
        .map_err(|e| format!("bad release time: {e}"))?;
    let event = KeystrokeEvent::new(code as u8, press, release).map_err(|e| e.to_string())?;
    Ok((user.to_string(), session.to_string(), event))
}

/// Reads a delimited keystroke log and groups rows into per-user sessions.
///
/// Rows that violate the event invariants are rejected one by one and listed
/// in the returned report. The call only fails outright when the file cannot
/// be read, a mapped column is missing, or no sequence survives.
pub fn parse_dataset(path: &Path, format: &TextFormat) -> Result<(UserCollection, ParseReport)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.delimiter)
        .has_headers(true)
        .flexible(true)
        .from_reader(BufReader::new(file));
    let headers = reader
        .headers()
        .map_err(|e| Error::Schema(format!("cannot read header: {e}")))?
        .clone();
    let cols = ColumnIndex::resolve(&headers, &format.columns)?;

    let mut report = ParseReport::default();
    // (user, session) -> slot; per user, slots in first-appearance order.
    let mut slots: HashMap<(String, String), usize> = HashMap::new();
    let mut sessions: Vec<KeystrokeSequence> = Vec::new();
    for (line, record) in (2u64..).zip(reader.records()) {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                if let csv::ErrorKind::Io(err) = e.kind() {
                    return Err(Error::io(path, std::io::Error::new(err.kind(), err.to_string())));
                }
                report.rejected_rows.push(RowRejection {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        match parse_row(&record, &cols) {
            Ok((user, session, event)) => {
                report.accepted_rows += 1;
                let slot = *slots.entry((user.clone(), session.clone())).or_insert_with(|| {
                    sessions.push(KeystrokeSequence {
                        user_id: user,
                        session_id: session,
                        events: Vec::new(),
                    });
                    sessions.len() - 1
                });
                sessions[slot].events.push(event);
            }
            Err(reason) => report.rejected_rows.push(RowRejection { line, reason }),
        }
    }

    let mut collection = UserCollection::new();
    for mut seq in sessions {
        if seq.events.len() < 2 {
            report.dropped_sequences += 1;
            continue;
        }
        seq.events
            .sort_by(|a, b| a.press_time.total_cmp(&b.press_time));
        collection
            .users
            .entry(seq.user_id.clone())
            .or_default()
            .push(seq);
    }
    if collection.is_empty() {
        return Err(Error::EmptyDataset {
            path: path.to_path_buf(),
            rejected_rows: report.rejected_count(),
        });
    }
    Ok((collection, report))
}

/// Writes `collection` in the layout read by [`parse_dataset`]. Floats use the
/// shortest representation that parses back to the same value.
pub fn write_dataset(collection: &UserCollection, path: &Path, format: &TextFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_dataset_to(collection, &mut out, format).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

fn write_dataset_to(
    collection: &UserCollection,
    out: &mut impl Write,
    format: &TextFormat,
) -> std::io::Result<()> {
    let d = format.delimiter as char;
    let c = &format.columns;
    writeln!(
        out,
        "{}{d}{}{d}{}{d}{}{d}{}",
        c.user_id, c.session_id, c.keycode, c.press_time, c.release_time
    )?;
    for (_, seqs) in collection.iter() {
        for seq in seqs {
            for ev in &seq.events {
                writeln!(
                    out,
                    "{}{d}{}{d}{}{d}{}{d}{}",
                    seq.user_id, seq.session_id, ev.keycode, ev.press_time, ev.release_time
                )?;
            }
        }
    }
    Ok(())
}

/// Parameters of the synthetic typist population.
///
/// Each user gets a persistent profile: a hold-time mean per key bucket and a
/// press-to-press interval mean per (previous bucket, next bucket) digraph.
/// Per-keystroke timings are Gaussian around the profile with relative standard
/// deviation `noise_scale * user_jitter`, clamped at 1 ms and rounded to whole
/// milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub sequences_per_user: usize,
    pub min_keys: usize,
    pub max_keys: usize,
    /// Population mean hold time, ms.
    pub mean_hold_ms: f64,
    /// Population mean press-to-press interval, ms.
    pub mean_interkey_ms: f64,
    /// Log-scale spread of user and bucket means around the population means.
    pub profile_spread: f64,
    /// Per-user jitter multipliers are drawn uniformly from this range.
    pub jitter_range: (f64, f64),
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_users: 100,
            sequences_per_user: 15,
            min_keys: 50,
            max_keys: 80,
            mean_hold_ms: 100.0,
            mean_interkey_ms: 200.0,
            profile_spread: 0.35,
            jitter_range: (0.5, 1.5),
            noise_scale: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.num_users == 0 {
            return bad("num_users must be at least 1");
        }
        if self.sequences_per_user == 0 {
            return bad("sequences_per_user must be at least 1");
        }
        if self.min_keys < 2 || self.min_keys > self.max_keys {
            return bad("key range must satisfy 2 <= min_keys <= max_keys");
        }
        if !(self.mean_hold_ms > 0.0 && self.mean_interkey_ms > 0.0) {
            return bad("latency means must be strictly positive");
        }
        if !(self.profile_spread >= 0.0 && self.noise_scale >= 0.0) {
            return bad("profile_spread and noise_scale must be non-negative");
        }
        let (lo, hi) = self.jitter_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("jitter_range must satisfy 0 < lo <= hi");
        }
        Ok(())
    }
}

const KEY_BUCKETS: usize = 6;
const SPACE: u8 = 32;
const SPACE_PROB: f64 = 0.18;
const PUNCTUATION: [u8; 3] = [188, 190, 8];

fn bucket(code: u8) -> usize {
    code as usize % KEY_BUCKETS
}

struct Profile {
    hold_ms: [f64; KEY_BUCKETS],
    interval_ms: [[f64; KEY_BUCKETS]; KEY_BUCKETS],
    jitter: f64,
}

fn lognormal_factor(rng: &mut impl Rng, spread: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    (spread * z).exp()
}

fn draw_profile(spec: &SyntheticSpec, rng: &mut impl Rng) -> Profile {
    let base_hold = spec.mean_hold_ms * lognormal_factor(rng, spec.profile_spread);
    let base_interval = spec.mean_interkey_ms * lognormal_factor(rng, spec.profile_spread);
    let mut hold_ms = [0.0; KEY_BUCKETS];
    for h in &mut hold_ms {
        *h = base_hold * lognormal_factor(rng, spec.profile_spread);
    }
    let mut interval_ms = [[0.0; KEY_BUCKETS]; KEY_BUCKETS];
    for row in &mut interval_ms {
        for v in row.iter_mut() {
            *v = base_interval * lognormal_factor(rng, spec.profile_spread);
        }
    }
    let (lo, hi) = spec.jitter_range;
    let jitter = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    Profile {
        hold_ms,
        interval_ms,
        jitter,
    }
}

fn draw_key(rng: &mut impl Rng) -> u8 {
    let u: f64 = rng.random();
    if u < SPACE_PROB {
        SPACE
    } else if u < SPACE_PROB + 0.04 {
        PUNCTUATION[rng.random_range(0..PUNCTUATION.len())]
    } else {
        rng.random_range(b'A'..=b'Z')
    }
}

fn jittered(rng: &mut impl Rng, mean: f64, rel_sd: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    (mean * (1.0 + rel_sd * z)).max(1.0).round()
}

/// Generates a reproducible synthetic population.
///
/// Profiles and sequences draw from separate random streams, so two specs that
/// differ only in `noise_scale` share profiles, key text and the underlying
/// standard-normal draws.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<UserCollection> {
    spec.validate()?;
    let width = digits(spec.num_users);
    let session_width = digits(spec.sequences_per_user);
    let mut collection = UserCollection::new();
    for u in 0..spec.num_users {
        let user_id = format!("u{u:0width$}");
        let profile = draw_profile(spec, &mut seed::item_rng(spec.seed, Stream::SyntheticProfiles, u as u64));
        let mut rng = seed::item_rng(spec.seed, Stream::SyntheticSequences, u as u64);
        let rel_sd = spec.noise_scale * profile.jitter;
        let mut seqs = Vec::with_capacity(spec.sequences_per_user);
        for s in 0..spec.sequences_per_user {
            let n = rng.random_range(spec.min_keys..=spec.max_keys);
            let mut t = 1_600_000_000_000.0 + (u as f64) * 1.0e8 + (s as f64) * 1.0e6;
            let mut events = Vec::with_capacity(n);
            let mut prev: Option<u8> = None;
            for _ in 0..n {
                let code = draw_key(&mut rng);
                if let Some(p) = prev {
                    t += jittered(&mut rng, profile.interval_ms[bucket(p)][bucket(code)], rel_sd);
                }
                let hold = jittered(&mut rng, profile.hold_ms[bucket(code)], rel_sd);
                events.push(KeystrokeEvent {
                    keycode: code,
                    press_time: t,
                    release_time: t + hold,
                });
                prev = Some(code);
            }
            seqs.push(KeystrokeSequence {
                user_id: user_id.clone(),
                session_id: format!("s{s:0session_width$}"),
                events,
            });
        }
        collection.insert_user(user_id, seqs);
    }
    Ok(collection)
}

fn digits(n: usize) -> usize {
    n.saturating_sub(1).max(1).to_string().len()
}

/// Partitions users (never sequences) into a train and a test collection.
///
/// The train side receives `round(n * train_fraction)` users, kept within
/// `1..n` whenever there are at least two users.
pub fn split_users(
    collection: &UserCollection,
    train_fraction: f64,
    seed: u64,
) -> Result<(UserCollection, UserCollection)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    if collection.is_empty() {
        return Err(Error::Config("cannot split an empty collection".into()));
    }
    let n = collection.num_users();
    let mut ids: Vec<&str> = collection.user_ids().collect();
    ids.shuffle(&mut seed::rng(seed, Stream::Split));
    let mut n_train = (n as f64 * train_fraction).round() as usize;
    if n >= 2 {
        n_train = n_train.clamp(1, n - 1);
    }
    let train = collection.subset(ids[..n_train].iter().copied());
    let test = collection.subset(ids[n_train..].iter().copied());
    Ok((train, test))
}
