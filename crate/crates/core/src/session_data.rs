//! Listening-log ingestion: parsing, sessionization, skip labelling,
//! length filtering, vocabulary construction and next-positive targets.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const END: usize = 2;
/// Index of the first real item.
pub const FIRST_ITEM: usize = 3;

pub const DEFAULT_GAP_SECONDS: i64 = 1200;
pub const DEFAULT_SKIP_SECONDS: i64 = 30;
pub const DEFAULT_MIN_EVENTS: usize = 5;
pub const DEFAULT_MAX_LEN: usize = 20;

/// One raw log row.
///
/// For the pre-sessionized schema `user_key` carries the session key and
/// `timestamp` the position inside the session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub user_key: String,
    pub timestamp: i64,
    pub track_key: String,
    pub skip_annotation: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schema {
    RawLog,
    PreSessionized,
}

impl Schema {
    pub fn as_str(self) -> &'static str {
        match self {
            Schema::RawLog => "raw-log",
            Schema::PreSessionized => "pre-sessionized",
        }
    }
}

impl FromStr for Schema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw-log" => Ok(Schema::RawLog),
            "pre-sessionized" => Ok(Schema::PreSessionized),
            other => Err(Error::Config(format!(
                "unknown schema `{other}` (expected raw-log or pre-sessionized)"
            ))),
        }
    }
}

/// Reads tab- or comma-separated rows. Blank lines are ignored.
pub fn parse_events<R: BufRead>(input: R, schema: Schema) -> Result<Vec<Event>> {
    let mut events = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        events.push(parse_row(line, schema).map_err(|message| Error::Parse {
            line: line_no,
            message,
        })?);
    }
    Ok(events)
}

fn parse_row(line: &str, schema: Schema) -> std::result::Result<Event, String> {
    let sep = if line.contains('\t') { '\t' } else { ',' };
    let fields: Vec<&str> = line.split(sep).map(str::trim).collect();
    let expected = match schema {
        Schema::RawLog => 3,
        Schema::PreSessionized => 4,
    };
    if fields.len() != expected {
        return Err(format!(
            "expected {expected} fields for {}, found {}",
            schema.as_str(),
            fields.len()
        ));
    }
    if fields[0].is_empty() {
        return Err("empty key".into());
    }
    let timestamp: i64 = fields[1]
        .parse()
        .map_err(|_| format!("`{}` is not an integer", fields[1]))?;
    if timestamp < 0 {
        return Err(format!("negative {} {timestamp}", if schema == Schema::RawLog { "timestamp" } else { "position" }));
    }
    if fields[2].is_empty() {
        return Err("empty track key".into());
    }
    let skip_annotation = match schema {
        Schema::RawLog => None,
        Schema::PreSessionized => Some(match fields[3] {
            "1" => true,
            "0" => false,
            other => return Err(format!("skip flag must be 0 or 1, found `{other}`")),
        }),
    };
    Ok(Event {
        user_key: fields[0].to_string(),
        timestamp,
        track_key: fields[2].to_string(),
        skip_annotation,
    })
}

/// A sessionized but not yet labelled run of events; the user key is gone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawSession {
    pub events: Vec<RawEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawEntry {
    pub timestamp: i64,
    pub track_key: String,
    pub skip_annotation: Option<bool>,
}

impl From<Event> for RawEntry {
    fn from(e: Event) -> Self {
        RawEntry {
            timestamp: e.timestamp,
            track_key: e.track_key,
            skip_annotation: e.skip_annotation,
        }
    }
}

fn group_by_key(events: Vec<Event>) -> BTreeMap<String, Vec<Event>> {
    let mut groups: BTreeMap<String, Vec<Event>> = BTreeMap::new();
    for e in events {
        groups.entry(e.user_key.clone()).or_default().push(e);
    }
    for g in groups.values_mut() {
        // stable: equal timestamps keep file order
        g.sort_by_key(|e| e.timestamp);
    }
    groups
}

/// Splits each user's chronological stream wherever consecutive events are
/// more than `gap_seconds` apart. Output is ordered by user key, then time.
pub fn sessionize(events: Vec<Event>, gap_seconds: i64) -> Vec<RawSession> {
    let mut sessions = Vec::new();
    for (_, stream) in group_by_key(events) {
        let mut current: Vec<RawEntry> = Vec::new();
        let mut last: Option<i64> = None;
        for e in stream {
            if let Some(prev) = last {
                if e.timestamp - prev > gap_seconds {
                    sessions.push(RawSession {
                        events: std::mem::take(&mut current),
                    });
                }
            }
            last = Some(e.timestamp);
            current.push(e.into());
        }
        if !current.is_empty() {
            sessions.push(RawSession { events: current });
        }
    }
    sessions
}

/// Groups pre-sessionized rows by session key, ordered by position.
pub fn group_sessions(events: Vec<Event>) -> Vec<RawSession> {
    group_by_key(events)
        .into_values()
        .map(|g| RawSession {
            events: g.into_iter().map(RawEntry::from).collect(),
        })
        .collect()
}

/// A session whose tracks are still keyed by their original identifiers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSession {
    pub tracks: Vec<String>,
    pub skipped: Vec<bool>,
}

impl LabeledSession {
    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }
}

/// Marks skips.
///
/// When every entry carries an annotation the annotations are copied.
/// Otherwise entry `t` is skipped iff the next entry started less than
/// `threshold_seconds` later; the final entry is never skipped.
pub fn label_skips(session: &RawSession, threshold_seconds: i64) -> Result<LabeledSession> {
    let annotated = session
        .events
        .iter()
        .filter(|e| e.skip_annotation.is_some())
        .count();
    let tracks: Vec<String> = session.events.iter().map(|e| e.track_key.clone()).collect();
    if annotated == session.events.len() {
        let skipped = session
            .events
            .iter()
            .map(|e| e.skip_annotation.unwrap_or(false))
            .collect();
        return Ok(LabeledSession { tracks, skipped });
    }
    if annotated != 0 {
        return Err(Error::Data(
            "session mixes annotated and timestamp-only events".into(),
        ));
    }
    let n = session.events.len();
    let skipped = (0..n)
        .map(|t| {
            t + 1 < n && session.events[t + 1].timestamp - session.events[t].timestamp < threshold_seconds
        })
        .collect();
    Ok(LabeledSession { tracks, skipped })
}

/// Consecutive `max_len` chunks of a session of length `len`, dropping any
/// chunk shorter than `min_events`.
pub fn chunk_bounds(len: usize, min_events: usize, max_len: usize) -> Vec<std::ops::Range<usize>> {
    assert!(max_len > 0);
    (0..len)
        .step_by(max_len)
        .map(|start| start..(start + max_len).min(len))
        .filter(|r| r.len() >= min_events)
        .collect()
}

/// Drops short sessions and chunks long ones.
pub fn filter_and_split(
    sessions: Vec<LabeledSession>,
    min_events: usize,
    max_len: usize,
) -> Vec<LabeledSession> {
    let mut out = Vec::new();
    for s in sessions {
        for r in chunk_bounds(s.len(), min_events, max_len) {
            out.push(LabeledSession {
                tracks: s.tracks[r.clone()].to_vec(),
                skipped: s.skipped[r].to_vec(),
            });
        }
    }
    out
}

/// Track-key to item-index mapping. Indices 0..3 are reserved for padding,
/// the mask token and the end token.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocabulary {
    forward: HashMap<String, usize>,
    reverse: Vec<String>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a vocabulary from keys in index order; duplicates are rejected.
    pub fn from_keys<I, S>(keys: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary::new();
        for k in keys {
            let k = k.into();
            if v.forward.contains_key(&k) {
                return Err(Error::Data(format!("duplicate track key `{k}`")));
            }
            v.insert(k);
        }
        Ok(v)
    }

    fn insert(&mut self, key: String) -> usize {
        if let Some(&idx) = self.forward.get(&key) {
            return idx;
        }
        let idx = FIRST_ITEM + self.reverse.len();
        self.forward.insert(key.clone(), idx);
        self.reverse.push(key);
        idx
    }

    pub fn index(&self, key: &str) -> Option<usize> {
        self.forward.get(key).copied()
    }

    pub fn key(&self, index: usize) -> Option<&str> {
        index
            .checked_sub(FIRST_ITEM)
            .and_then(|i| self.reverse.get(i))
            .map(String::as_str)
    }

    /// Total index space, reserved tokens included.
    pub fn len(&self) -> usize {
        FIRST_ITEM + self.reverse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reverse.is_empty()
    }

    pub fn num_items(&self) -> usize {
        self.reverse.len()
    }

    pub fn item_indices(&self) -> std::ops::Range<usize> {
        FIRST_ITEM..self.len()
    }

    pub fn keys(&self) -> &[String] {
        &self.reverse
    }

    /// SHA-256 over the keys in index order, newline-terminated.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for k in &self.reverse {
            h.update(k.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn encode(&self, session: &LabeledSession) -> Result<Session> {
        let items = session
            .tracks
            .iter()
            .map(|k| {
                self.index(k)
                    .ok_or_else(|| Error::Data(format!("track `{k}` not in vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        Session::new(items, session.skipped.clone())
    }
}

/// First-appearance vocabulary over all sessions.
pub fn build_vocabulary(sessions: &[LabeledSession]) -> Vocabulary {
    let mut v = Vocabulary::new();
    for s in sessions {
        for k in &s.tracks {
            v.insert(k.clone());
        }
    }
    v
}

/// An indexed session: item indices plus per-position skip flags.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Session {
    items: Vec<usize>,
    skipped: Vec<bool>,
}

impl Session {
    pub fn new(items: Vec<usize>, skipped: Vec<bool>) -> Result<Self> {
        if items.len() != skipped.len() {
            return Err(Error::Data(format!(
                "{} items but {} skip flags",
                items.len(),
                skipped.len()
            )));
        }
        if let Some(bad) = items.iter().find(|&&i| i < FIRST_ITEM) {
            return Err(Error::Data(format!("reserved index {bad} used as an item")));
        }
        Ok(Session { items, skipped })
    }

    pub fn items(&self) -> &[usize] {
        &self.items
    }

    pub fn skipped(&self) -> &[bool] {
        &self.skipped
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn skip_count(&self) -> usize {
        self.skipped.iter().filter(|&&s| s).count()
    }

    pub fn prefix(&self, len: usize) -> Session {
        Session {
            items: self.items[..len].to_vec(),
            skipped: self.skipped[..len].to_vec(),
        }
    }

    pub fn push(&mut self, item: usize, skipped: bool) {
        self.items.push(item);
        self.skipped.push(skipped);
    }
}

/// Next-positive targets and skip sets of one session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetMap {
    pub next_positive: Vec<Option<usize>>,
    pub negatives_between: Vec<Vec<usize>>,
    pub negatives_all: Vec<usize>,
    /// `positive_from[f]` is the first non-skipped position `>= f`.
    positive_from: Vec<Option<usize>>,
}

impl TargetMap {
    /// First non-skipped position at or after `from`.
    pub fn positive_from(&self, from: usize) -> Option<usize> {
        self.positive_from.get(from).copied().flatten()
    }

    /// Skipped positions in `from..until`.
    pub fn skips_in(&self, from: usize, until: usize) -> Vec<usize> {
        self.negatives_all
            .iter()
            .copied()
            .filter(|&p| p >= from && p < until)
            .collect()
    }
}

pub fn build_targets(session: &Session) -> TargetMap {
    let n = session.len();
    let skipped = session.skipped();
    let mut positive_from = vec![None; n + 1];
    for f in (0..n).rev() {
        positive_from[f] = if skipped[f] { positive_from[f + 1] } else { Some(f) };
    }
    let next_positive: Vec<Option<usize>> = (0..n).map(|t| positive_from[t + 1]).collect();
    let negatives_all: Vec<usize> = (0..n).filter(|&p| skipped[p]).collect();
    let negatives_between = next_positive
        .iter()
        .enumerate()
        .map(|(t, m)| match m {
            Some(m) => (t + 1..*m).collect(),
            None => Vec::new(),
        })
        .collect();
    TargetMap {
        next_positive,
        negatives_between,
        negatives_all,
        positive_from,
    }
}

/// Final item for testing, second-to-last for validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HoldoutSplit {
    pub train_prefix: Session,
    pub validation_target: (usize, bool),
    pub test_target: (usize, bool),
}

impl HoldoutSplit {
    /// The prefix used when predicting the test target.
    pub fn test_prefix(&self) -> Session {
        let mut s = self.train_prefix.clone();
        s.push(self.validation_target.0, self.validation_target.1);
        s
    }

    pub fn reassemble(&self) -> Session {
        let mut s = self.test_prefix();
        s.push(self.test_target.0, self.test_target.1);
        s
    }
}

pub fn holdout_split(session: &Session) -> Result<HoldoutSplit> {
    let n = session.len();
    if n < 3 {
        return Err(Error::Split(n));
    }
    let at = |i: usize| (session.items[i], session.skipped[i]);
    Ok(HoldoutSplit {
        train_prefix: session.prefix(n - 2),
        validation_target: at(n - 2),
        test_target: at(n - 1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(ts: &[i64]) -> RawSession {
        RawSession {
            events: ts
                .iter()
                .enumerate()
                .map(|(i, &t)| RawEntry {
                    timestamp: t,
                    track_key: format!("t{i}"),
                    skip_annotation: None,
                })
                .collect(),
        }
    }

    fn ev(user: &str, ts: i64, track: &str) -> Event {
        Event {
            user_key: user.into(),
            timestamp: ts,
            track_key: track.into(),
            skip_annotation: None,
        }
    }

    fn labeled(len: usize) -> LabeledSession {
        LabeledSession {
            tracks: (0..len).map(|i| format!("k{i}")).collect(),
            skipped: vec![false; len],
        }
    }

    fn session(skipped: &[bool]) -> Session {
        Session::new((0..skipped.len()).map(|i| FIRST_ITEM + i).collect(), skipped.to_vec()).unwrap()
    }

    #[test]
    fn parses_raw_log_row() {
        let ev = parse_events("u1\t1700000000\ttrackA\n".as_bytes(), Schema::RawLog).unwrap();
        assert_eq!(ev, vec![Event {
            user_key: "u1".into(),
            timestamp: 1_700_000_000,
            track_key: "trackA".into(),
            skip_annotation: None
        }]);
    }

    #[test]
    fn parses_presessionized_row() {
        let ev = parse_events("s9\t3\ttrackB\t1".as_bytes(), Schema::PreSessionized).unwrap();
        assert_eq!(ev[0].user_key, "s9");
        assert_eq!(ev[0].timestamp, 3);
        assert_eq!(ev[0].track_key, "trackB");
        assert_eq!(ev[0].skip_annotation, Some(true));
    }

    #[test]
    fn parses_comma_separated_and_empty() {
        let ev = parse_events("u,5,a\nu,9,b\n".as_bytes(), Schema::RawLog).unwrap();
        assert_eq!(ev.len(), 2);
        assert!(parse_events("".as_bytes(), Schema::RawLog).unwrap().is_empty());
    }

    #[test]
    fn malformed_row_reports_line() {
        let err = parse_events("u\t1\ta\nu\tx\tb\n".as_bytes(), Schema::RawLog).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_events("s\t1\ta\t2\n".as_bytes(), Schema::PreSessionized).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_events("u\t-4\ta\n".as_bytes(), Schema::RawLog).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn unknown_schema_is_config_error() {
        assert!(matches!("csv".parse::<Schema>(), Err(Error::Config(_))));
    }

    #[test]
    fn sessionize_splits_on_strict_gap() {
        let s = sessionize(vec![ev("u", 0, "a"), ev("u", 600, "b"), ev("u", 2001, "c")], 1200);
        let ts: Vec<Vec<i64>> = s.iter().map(|s| s.events.iter().map(|e| e.timestamp).collect()).collect();
        assert_eq!(ts, vec![vec![0, 600], vec![2001]]);

        let s = sessionize(vec![ev("u", 0, "a"), ev("u", 1200, "b")], 1200);
        assert_eq!(s.len(), 1);
        assert!(sessionize(Vec::new(), 1200).is_empty());
    }

    #[test]
    fn sessionize_groups_interleaved_users() {
        let s = sessionize(
            vec![ev("b", 10, "x"), ev("a", 0, "p"), ev("b", 20, "y"), ev("a", 5, "q")],
            1200,
        );
        assert_eq!(s.len(), 2);
        let keys: Vec<Vec<&str>> = s
            .iter()
            .map(|s| s.events.iter().map(|e| e.track_key.as_str()).collect())
            .collect();
        assert_eq!(keys, vec![vec!["p", "q"], vec!["x", "y"]]);
    }

    #[test]
    fn skip_labels_from_timestamps() {
        assert_eq!(label_skips(&raw(&[0, 25, 300]), 30).unwrap().skipped, vec![true, false, false]);
        assert_eq!(label_skips(&raw(&[0, 30]), 30).unwrap().skipped, vec![false, false]);
    }

    #[test]
    fn skip_labels_passthrough_and_mixed() {
        let mut r = raw(&[0, 1, 2]);
        for (e, f) in r.events.iter_mut().zip([true, false, true]) {
            e.skip_annotation = Some(f);
        }
        assert_eq!(label_skips(&r, 30).unwrap().skipped, vec![true, false, true]);
        r.events[1].skip_annotation = None;
        assert!(matches!(label_skips(&r, 30), Err(Error::Data(_))));
    }

    #[test]
    fn filter_and_chunk_lengths() {
        let lens = |l: usize| -> Vec<usize> {
            filter_and_split(vec![labeled(l)], 5, 20).iter().map(LabeledSession::len).collect()
        };
        assert!(lens(4).is_empty());
        assert_eq!(lens(45), vec![20, 20, 5]);
        assert_eq!(lens(43), vec![20, 20]);
        assert_eq!(lens(5), vec![5]);
    }

    #[test]
    fn vocabulary_first_appearance() {
        let mk = |t: &[&str]| LabeledSession {
            tracks: t.iter().map(|s| s.to_string()).collect(),
            skipped: vec![false; t.len()],
        };
        let sessions = vec![mk(&["a", "b"]), mk(&["b", "c"])];
        let v = build_vocabulary(&sessions);
        assert_eq!((v.index("a"), v.index("b"), v.index("c")), (Some(3), Some(4), Some(5)));
        assert_eq!(v, build_vocabulary(&sessions));
        let empty = build_vocabulary(&[]);
        assert_eq!(empty.len(), FIRST_ITEM);
        assert_eq!(empty.num_items(), 0);
        assert_eq!(v.key(4), Some("b"));
        assert_eq!(v.key(1), None);
    }

    #[test]
    fn targets_with_skips() {
        let tm = build_targets(&session(&[false, true, true, false, false]));
        assert_eq!(tm.next_positive, vec![Some(3), Some(3), Some(3), Some(4), None]);
        assert_eq!(tm.negatives_between[0], vec![1, 2]);
        assert_eq!(tm.negatives_between[1], vec![2]);
        assert!(tm.negatives_between[2].is_empty());
        assert_eq!(tm.negatives_all, vec![1, 2]);
        assert_eq!(tm.positive_from(0), Some(0));
        assert_eq!(tm.positive_from(1), Some(3));
        assert_eq!(tm.skips_in(1, 3), vec![1, 2]);
    }

    #[test]
    fn targets_all_positive_and_no_successor() {
        let tm = build_targets(&session(&[false; 4]));
        assert_eq!(tm.next_positive, vec![Some(1), Some(2), Some(3), None]);
        assert!(tm.negatives_all.is_empty());
        assert!(tm.negatives_between.iter().all(Vec::is_empty));

        let tm = build_targets(&session(&[false, true]));
        assert_eq!(tm.next_positive, vec![None, None]);
        assert_eq!(tm.negatives_all, vec![1]);
    }

    #[test]
    fn holdout_split_cases() {
        let s = session(&[false, true, false, false, true]);
        let h = holdout_split(&s).unwrap();
        assert_eq!(h.train_prefix.items(), &[3, 4, 5]);
        assert_eq!(h.validation_target, (6, false));
        assert_eq!(h.test_target, (7, true));
        assert_eq!(h.reassemble(), s);
        assert_eq!(holdout_split(&session(&[false; 3])).unwrap().train_prefix.len(), 1);
        assert!(matches!(holdout_split(&session(&[false; 2])), Err(Error::Split(2))));
    }

    #[test]
    fn session_rejects_reserved_and_mismatch() {
        assert!(Session::new(vec![1], vec![false]).is_err());
        assert!(Session::new(vec![3, 4], vec![false]).is_err());
    }
}
