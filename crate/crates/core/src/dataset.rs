//! The `SKIPREC-DS/1` on-disk dataset.
//!
//! A dataset directory holds three files:
//!
//! * `sessions.txt` starts with the line `SKIPREC-DS/1`; every further line is
//!   one session: space-separated item indices, a tab, then one `0`/`1` skip
//!   flag per item with no separators (`3 4 5\t010`).
//! * `vocab.txt` lists track keys in index order, one per line, starting at
//!   index 3 (0, 1 and 2 are the padding, mask and end tokens).
//! * `manifest.json` records counts, the skip rate, content hashes and the
//!   settings that produced the data.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::session_data::{
    build_vocabulary, filter_and_split, group_sessions, label_skips, parse_events, sessionize,
    HoldoutSplit, LabeledSession, Schema, Session, Vocabulary, DEFAULT_GAP_SECONDS,
    DEFAULT_MAX_LEN, DEFAULT_MIN_EVENTS, DEFAULT_SKIP_SECONDS,
};

pub const DATASET_MAGIC: &str = "SKIPREC-DS/1";
pub const SESSIONS_FILE: &str = "sessions.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub sessions: Vec<Session>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub vocab_size: usize,
    pub num_items: usize,
    pub session_count: usize,
    pub event_count: usize,
    pub skip_rate: f64,
    pub sessions_with_skip: f64,
    pub vocab_hash: String,
    pub dataset_hash: String,
    pub settings: BTreeMap<String, serde_json::Value>,
}

impl Dataset {
    pub fn new(vocab: Vocabulary, sessions: Vec<Session>) -> Result<Self> {
        let limit = vocab.len();
        for s in &sessions {
            if let Some(bad) = s.items().iter().find(|&&i| i >= limit) {
                return Err(Error::Data(format!(
                    "item index {bad} outside vocabulary of size {limit}"
                )));
            }
        }
        Ok(Dataset { vocab, sessions })
    }

    pub fn event_count(&self) -> usize {
        self.sessions.iter().map(Session::len).sum()
    }

    pub fn skip_count(&self) -> usize {
        self.sessions.iter().map(Session::skip_count).sum()
    }

    pub fn skip_rate(&self) -> f64 {
        let n = self.event_count();
        if n == 0 {
            0.0
        } else {
            self.skip_count() as f64 / n as f64
        }
    }

    pub fn sessions_text(&self) -> String {
        let mut out = String::with_capacity(self.event_count() * 6 + 16);
        out.push_str(DATASET_MAGIC);
        out.push('\n');
        for s in &self.sessions {
            for (i, item) in s.items().iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                write!(out, "{item}").unwrap();
            }
            out.push('\t');
            for &f in s.skipped() {
                out.push(if f { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    pub fn vocab_text(&self) -> String {
        let mut out = String::new();
        for k in self.vocab.keys() {
            out.push_str(k);
            out.push('\n');
        }
        out
    }

    /// SHA-256 over the vocabulary and session files.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.vocab_text().as_bytes());
        h.update(self.sessions_text().as_bytes());
        hex::encode(h.finalize())
    }

    pub fn manifest(&self, settings: BTreeMap<String, serde_json::Value>) -> DatasetManifest {
        let with_skip = self.sessions.iter().filter(|s| s.skip_count() > 0).count();
        DatasetManifest {
            format: DATASET_MAGIC.to_string(),
            vocab_size: self.vocab.len(),
            num_items: self.vocab.num_items(),
            session_count: self.sessions.len(),
            event_count: self.event_count(),
            skip_rate: self.skip_rate(),
            sessions_with_skip: if self.sessions.is_empty() {
                0.0
            } else {
                with_skip as f64 / self.sessions.len() as f64
            },
            vocab_hash: self.vocab.hash(),
            dataset_hash: self.content_hash(),
            settings,
        }
    }

    /// Writes the three dataset files into `dir`, creating it if needed.
    pub fn write(
        &self,
        dir: &Path,
        settings: BTreeMap<String, serde_json::Value>,
    ) -> Result<DatasetManifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = self.manifest(settings);
        write_file(&dir.join(SESSIONS_FILE), self.sessions_text().as_bytes())?;
        write_file(&dir.join(VOCAB_FILE), self.vocab_text().as_bytes())?;
        let json = serde_json::to_string_pretty(&manifest)? + "\n";
        write_file(&dir.join(MANIFEST_FILE), json.as_bytes())?;
        Ok(manifest)
    }

    pub fn read(dir: &Path) -> Result<Dataset> {
        let vocab_path = dir.join(VOCAB_FILE);
        let vocab_text = fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        let vocab = Vocabulary::from_keys(vocab_text.lines())?;

        let path = dir.join(SESSIONS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(DATASET_MAGIC) {
            return Err(Error::format(&path, format!("missing {DATASET_MAGIC} header")));
        }
        let mut sessions = Vec::new();
        for (i, line) in lines.enumerate() {
            let bad = |m: &str| Error::format(&path, format!("line {}: {m}", i + 2));
            let (items, flags) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
            let items = items
                .split(' ')
                .map(|t| t.parse::<usize>().map_err(|_| bad("bad item index")))
                .collect::<Result<Vec<_>>>()?;
            let flags = flags
                .chars()
                .map(|c| match c {
                    '0' => Ok(false),
                    '1' => Ok(true),
                    _ => Err(bad("bad skip flag")),
                })
                .collect::<Result<Vec<_>>>()?;
            sessions.push(Session::new(items, flags).map_err(|e| bad(&e.to_string()))?);
        }
        Dataset::new(vocab, sessions)
    }

    pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Holdout splits for every session long enough to have one.
    pub fn holdout_splits(&self) -> Vec<HoldoutSplit> {
        self.sessions
            .iter()
            .filter_map(|s| crate::session_data::holdout_split(s).ok())
            .collect()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Preprocessing settings for turning an event log into a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub schema: Schema,
    pub gap_seconds: i64,
    pub skip_seconds: i64,
    pub min_events: usize,
    pub max_len: usize,
    /// Target share of sessions containing a skip; `None` keeps all sessions.
    pub skip_session_fraction: Option<f64>,
    pub seed: u64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            schema: Schema::RawLog,
            gap_seconds: DEFAULT_GAP_SECONDS,
            skip_seconds: DEFAULT_SKIP_SECONDS,
            min_events: DEFAULT_MIN_EVENTS,
            max_len: DEFAULT_MAX_LEN,
            skip_session_fraction: None,
            seed: 0,
        }
    }
}

impl IngestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gap_seconds < 0 || self.skip_seconds < 0 {
            return Err(Error::Config("gap and skip thresholds must be non-negative".into()));
        }
        if self.max_len == 0 || self.min_events == 0 {
            return Err(Error::Config("min_events and max_len must be positive".into()));
        }
        if self.min_events > self.max_len {
            return Err(Error::Conflict {
                first: "min_events".into(),
                second: "max_len".into(),
                message: format!(
                    "min_events {} exceeds max_len {}: every session would be dropped",
                    self.min_events, self.max_len
                ),
            });
        }
        Ok(())
    }
}

/// Sessionizes, labels, filters, chunks and indexes a parsed event log.
pub fn build_dataset(events: Vec<crate::session_data::Event>, config: &IngestConfig) -> Result<Dataset> {
    config.validate()?;
    let raw = match config.schema {
        Schema::RawLog => sessionize(events, config.gap_seconds),
        Schema::PreSessionized => group_sessions(events),
    };
    let labeled = raw
        .iter()
        .map(|s| label_skips(s, config.skip_seconds))
        .collect::<Result<Vec<_>>>()?;
    let mut kept = filter_and_split(labeled, config.min_events, config.max_len);
    if let Some(f) = config.skip_session_fraction {
        kept = sample_skip_fraction(kept, f, &mut stream(config.seed, Stream::Sampling))?;
    }
    let vocab = build_vocabulary(&kept);
    let sessions = kept.iter().map(|s| vocab.encode(s)).collect::<Result<Vec<_>>>()?;
    Dataset::new(vocab, sessions)
}

/// Reads an event log and builds the dataset.
pub fn ingest<R: std::io::BufRead>(input: R, config: &IngestConfig) -> Result<Dataset> {
    build_dataset(parse_events(input, config.schema)?, config)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Subsamples sessions so that roughly `fraction` of the kept sessions contain
/// at least one skip. All sessions of the scarcer kind are kept; the other
/// kind is drawn without replacement. Original order is preserved.
pub fn sample_skip_fraction<R: Rng + ?Sized>(
    sessions: Vec<LabeledSession>,
    fraction: f64,
    rng: &mut R,
) -> Result<Vec<LabeledSession>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "skip-session fraction {fraction} outside [0, 1]"
        )));
    }
    let has_skip: Vec<bool> = sessions.iter().map(|s| s.skipped.iter().any(|&f| f)).collect();
    let with: Vec<usize> = (0..sessions.len()).filter(|&i| has_skip[i]).collect();
    let without: Vec<usize> = (0..sessions.len()).filter(|&i| !has_skip[i]).collect();

    let (mut keep_with, mut keep_without) = (with.len(), without.len());
    if fraction == 0.0 {
        keep_with = 0;
    } else if fraction == 1.0 {
        keep_without = 0;
    } else {
        let want_without = (with.len() as f64 * (1.0 - fraction) / fraction).round() as usize;
        if want_without <= without.len() {
            keep_without = want_without;
        } else {
            keep_with = ((without.len() as f64 * fraction / (1.0 - fraction)).round() as usize)
                .min(with.len());
        }
    }

    let mut chosen = Vec::with_capacity(keep_with + keep_without);
    let mut with = with;
    let mut without = without;
    with.shuffle(rng);
    without.shuffle(rng);
    chosen.extend_from_slice(&with[..keep_with]);
    chosen.extend_from_slice(&without[..keep_without]);
    chosen.sort_unstable();

    let mut slots: Vec<Option<LabeledSession>> = sessions.into_iter().map(Some).collect();
    Ok(chosen.into_iter().filter_map(|i| slots[i].take()).collect())
}
