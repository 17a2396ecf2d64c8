//! Human verification: two independent expert reviews per record, discard on
//! divergence, and a senior adjudicator when both reviewers modified.
//!
//! ```text
//! Pending ──review──▶ OneReviewed ──review──▶ Retained      (accept, accept)
//!                                          ├▶ Discarded     (accept, modify) or any discard
//!                                          └▶ Adjudication  (modify, modify)
//! Adjudication ──consistent──▶ Retained(final revision)
//!              └─inconsistent─▶ Discarded
//! ```
//!
//! Every mutation bumps the item's version and is guarded by the caller's
//! expected version. Mutations are appended to an event log before they are
//! applied; reopening the queue replays the log.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{validate_value, AnnotationRecord, ManifestEntry, TagVocabulary, ValidationErrors};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReviewState {
    Pending,
    OneReviewed,
    Adjudication,
    Retained,
    Discarded,
}

impl ReviewState {
    pub fn is_terminal(self) -> bool {
        matches!(self, ReviewState::Retained | ReviewState::Discarded)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    AcceptUnmodified,
    Modify,
    Discard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub reviewer_id: String,
    pub verdict: Verdict,
    /// Required iff the verdict is `Modify`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revision: Option<AnnotationRecord>,
    #[serde(default)]
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjudicationDecision {
    pub adjudicator_id: String,
    pub consistent: bool,
    /// Required iff `consistent`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_revision: Option<AnnotationRecord>,
    #[serde(default)]
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub item_id: String,
    pub record: AnnotationRecord,
    pub state: ReviewState,
    pub reviews: Vec<ReviewDecision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjudication: Option<AdjudicationDecision>,
    pub version: u64,
}

impl ReviewItem {
    pub fn new(record: AnnotationRecord) -> Self {
        Self {
            item_id: record.utterance_id.clone(),
            record,
            state: ReviewState::Pending,
            reviews: Vec::new(),
            adjudication: None,
            version: 1,
        }
    }

    /// The record as it leaves review: the adjudicated revision when there
    /// is one, else the original.
    pub fn final_record(&self) -> &AnnotationRecord {
        self.adjudication.as_ref().and_then(|a| a.final_revision.as_ref()).unwrap_or(&self.record)
    }

    pub fn has_reviewed(&self, reviewer_id: &str) -> bool {
        self.reviews.iter().any(|r| r.reviewer_id == reviewer_id)
    }
}

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("item {0} already exists")]
    DuplicateItem(String),
    #[error("no item {0}")]
    NotFound(String),
    #[error("version conflict: expected {expected}, item is at {actual}")]
    VersionConflict { expected: u64, actual: u64 },
    #[error("reviewer {0} already reviewed this item")]
    DuplicateReviewer(String),
    #[error("operation {op} not allowed in state {state:?}")]
    InvalidState { state: ReviewState, op: &'static str },
    #[error("invalid decision: {0}")]
    InvalidDecision(String),
    #[error("invalid record: {0}")]
    Validation(ValidationErrors),
    #[error("event log: {0}")]
    Io(String),
}

/// Outcome of the second review.
pub fn resolve(first: Verdict, second: Verdict) -> ReviewState {
    use Verdict::*;
    match (first, second) {
        (Discard, _) | (_, Discard) => ReviewState::Discarded,
        (AcceptUnmodified, AcceptUnmodified) => ReviewState::Retained,
        (Modify, Modify) => ReviewState::Adjudication,
        (AcceptUnmodified, Modify) | (Modify, AcceptUnmodified) => ReviewState::Discarded,
    }
}

fn check_revision(item: &ReviewItem, rev: &AnnotationRecord, vocab: &TagVocabulary) -> Result<(), ReviewError> {
    if rev.utterance_id != item.record.utterance_id {
        return Err(ReviewError::InvalidDecision("revision must keep the utterance id".into()));
    }
    validate_value(&rev.to_value(), vocab).map(|_| ()).map_err(ReviewError::Validation)
}

fn check_version(item: &ReviewItem, expected: u64) -> Result<(), ReviewError> {
    if item.version != expected {
        return Err(ReviewError::VersionConflict { expected, actual: item.version });
    }
    Ok(())
}

/// Applies a review to a copy of `item`.
pub fn apply_review(
    item: &ReviewItem,
    decision: ReviewDecision,
    expected_version: u64,
    vocab: &TagVocabulary,
) -> Result<ReviewItem, ReviewError> {
    check_version(item, expected_version)?;
    if !matches!(item.state, ReviewState::Pending | ReviewState::OneReviewed) {
        return Err(ReviewError::InvalidState { state: item.state, op: "review" });
    }
    if decision.reviewer_id.trim().is_empty() {
        return Err(ReviewError::InvalidDecision("reviewer_id is required".into()));
    }
    if item.has_reviewed(&decision.reviewer_id) {
        return Err(ReviewError::DuplicateReviewer(decision.reviewer_id));
    }
    match (&decision.verdict, &decision.revision) {
        (Verdict::Modify, Some(rev)) => check_revision(item, rev, vocab)?,
        (Verdict::Modify, None) => return Err(ReviewError::InvalidDecision("Modify requires a revision".into())),
        (_, Some(_)) => return Err(ReviewError::InvalidDecision("only Modify carries a revision".into())),
        (_, None) => {}
    }
    let mut next = item.clone();
    next.reviews.push(decision);
    next.state = match next.reviews.as_slice() {
        [_] => ReviewState::OneReviewed,
        [a, b] => resolve(a.verdict, b.verdict),
        _ => unreachable!("at most two reviews reach this point"),
    };
    next.version += 1;
    Ok(next)
}

pub fn apply_adjudication(
    item: &ReviewItem,
    decision: AdjudicationDecision,
    expected_version: u64,
    vocab: &TagVocabulary,
) -> Result<ReviewItem, ReviewError> {
    check_version(item, expected_version)?;
    if item.state != ReviewState::Adjudication {
        return Err(ReviewError::InvalidState { state: item.state, op: "adjudicate" });
    }
    if decision.adjudicator_id.trim().is_empty() {
        return Err(ReviewError::InvalidDecision("adjudicator_id is required".into()));
    }
    if item.has_reviewed(&decision.adjudicator_id) {
        return Err(ReviewError::InvalidDecision("the adjudicator must not be one of the reviewers".into()));
    }
    match (decision.consistent, &decision.final_revision) {
        (true, Some(rev)) => check_revision(item, rev, vocab)?,
        (true, None) => return Err(ReviewError::InvalidDecision("a consistent verdict requires final_revision".into())),
        (false, Some(_)) => {
            return Err(ReviewError::InvalidDecision("an inconsistent verdict carries no final_revision".into()))
        }
        (false, None) => {}
    }
    let mut next = item.clone();
    next.state = if decision.consistent { ReviewState::Retained } else { ReviewState::Discarded };
    next.adjudication = Some(decision);
    next.version += 1;
    Ok(next)
}

// ---------------------------------------------------------------------------
// Event log

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Enqueued { record: AnnotationRecord },
    Reviewed { decision: ReviewDecision, expected_version: u64 },
    Adjudicated { decision: AdjudicationDecision, expected_version: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub seq: u64,
    pub item_id: String,
    #[serde(flatten)]
    pub event: Event,
}

/// What a reviewer sees. Other reviewers' decisions stay hidden until both
/// reviews are in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    pub item_id: String,
    pub state: ReviewState,
    pub version: u64,
    pub record: AnnotationRecord,
    pub reviews_submitted: usize,
    pub reviews: Option<Vec<ReviewDecision>>,
    pub adjudication: Option<AdjudicationDecision>,
}

impl ItemView {
    pub fn of(item: &ReviewItem) -> Self {
        let blinded = matches!(item.state, ReviewState::Pending | ReviewState::OneReviewed);
        Self {
            item_id: item.item_id.clone(),
            state: item.state,
            version: item.version,
            record: item.record.clone(),
            reviews_submitted: item.reviews.len(),
            reviews: (!blinded).then(|| item.reviews.clone()),
            adjudication: item.adjudication.clone(),
        }
    }
}

struct Inner {
    items: BTreeMap<String, ReviewItem>,
    seq: u64,
    log: Option<File>,
}

/// The review queue: materialized state plus an optional on-disk log.
pub struct ReviewQueue {
    inner: Mutex<Inner>,
    vocab: TagVocabulary,
    log_path: Option<PathBuf>,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

impl ReviewQueue {
    pub fn in_memory(vocab: TagVocabulary) -> Self {
        Self { inner: Mutex::new(Inner { items: BTreeMap::new(), seq: 0, log: None }), vocab, log_path: None }
    }

    /// Opens a log-backed queue, replaying the existing log.
    pub fn open(log_path: impl AsRef<Path>, vocab: TagVocabulary) -> Result<Self, ReviewError> {
        let path = log_path.as_ref().to_path_buf();
        let mut items = BTreeMap::new();
        let mut seq = 0;
        if let Ok(text) = std::fs::read_to_string(&path) {
            for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let entry: LogLine = serde_json::from_str(line)
                    .map_err(|e| ReviewError::Io(format!("{}:{}: {e}", path.display(), n + 1)))?;
                apply_event(&mut items, &entry.item_id, entry.event, &vocab)?;
                seq = entry.seq;
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| ReviewError::Io(e.to_string()))?;
        }
        let log = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| ReviewError::Io(e.to_string()))?;
        Ok(Self { inner: Mutex::new(Inner { items, seq, log: Some(log) }), vocab, log_path: Some(path) })
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.log_path.as_deref()
    }

    fn commit(&self, item_id: &str, event: Event) -> Result<ReviewItem, ReviewError> {
        let mut inner = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        let mut scratch = BTreeMap::new();
        if let Some(existing) = inner.items.get(item_id) {
            scratch.insert(item_id.to_string(), existing.clone());
        }
        let next = apply_event(&mut scratch, item_id, event.clone(), &self.vocab)?;
        let seq = inner.seq + 1;
        if let Some(log) = inner.log.as_mut() {
            let line = serde_json::to_string(&LogLine { seq, item_id: item_id.to_string(), event }).expect("serializes");
            writeln!(log, "{line}").and_then(|_| log.flush()).map_err(|e| ReviewError::Io(e.to_string()))?;
        }
        inner.seq = seq;
        inner.items.insert(item_id.to_string(), next.clone());
        Ok(next)
    }

    pub fn enqueue(&self, record: AnnotationRecord) -> Result<ReviewItem, ReviewError> {
        validate_value(&record.to_value(), &self.vocab).map_err(ReviewError::Validation)?;
        let id = record.utterance_id.clone();
        self.commit(&id, Event::Enqueued { record })
    }

    /// Enqueues a record from JSON text, validating it first.
    pub fn enqueue_json(&self, raw: &str) -> Result<ReviewItem, ReviewError> {
        let record = crate::schema::validate_record(raw, &self.vocab).map_err(ReviewError::Validation)?;
        self.enqueue(record)
    }

    pub fn submit_review(
        &self,
        item_id: &str,
        mut decision: ReviewDecision,
        expected_version: u64,
    ) -> Result<ReviewItem, ReviewError> {
        if decision.timestamp_ms == 0 {
            decision.timestamp_ms = now_ms();
        }
        self.commit(item_id, Event::Reviewed { decision, expected_version })
    }

    pub fn submit_adjudication(
        &self,
        item_id: &str,
        mut decision: AdjudicationDecision,
        expected_version: u64,
    ) -> Result<ReviewItem, ReviewError> {
        if decision.timestamp_ms == 0 {
            decision.timestamp_ms = now_ms();
        }
        self.commit(item_id, Event::Adjudicated { decision, expected_version })
    }

    pub fn get(&self, item_id: &str) -> Option<ReviewItem> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner()).items.get(item_id).cloned()
    }

    pub fn items(&self) -> Vec<ReviewItem> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner()).items.values().cloned().collect()
    }

    /// Items awaiting `reviewer`: open for review and not yet reviewed by
    /// them. With `adjudicator` set, items awaiting adjudication that they
    /// did not review.
    pub fn queue_for(&self, reviewer: Option<&str>, adjudicator: bool) -> Vec<ItemView> {
        let inner = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        inner
            .items
            .values()
            .filter(|i| {
                let open = if adjudicator {
                    i.state == ReviewState::Adjudication
                } else {
                    matches!(i.state, ReviewState::Pending | ReviewState::OneReviewed)
                };
                open && reviewer.is_none_or(|r| !i.has_reviewed(r))
            })
            .map(ItemView::of)
            .collect()
    }

    /// Retained items with the adjudicated revision substituted.
    pub fn export_retained(&self) -> Vec<ManifestEntry> {
        export_retained(&self.items())
    }

    pub fn counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for i in self.items() {
            *out.entry(format!("{:?}", i.state)).or_insert(0) += 1;
        }
        out
    }
}

fn apply_event(
    items: &mut BTreeMap<String, ReviewItem>,
    item_id: &str,
    event: Event,
    vocab: &TagVocabulary,
) -> Result<ReviewItem, ReviewError> {
    let next = match event {
        Event::Enqueued { record } => {
            if items.contains_key(item_id) {
                return Err(ReviewError::DuplicateItem(item_id.to_string()));
            }
            ReviewItem::new(record)
        }
        Event::Reviewed { decision, expected_version } => {
            let item = items.get(item_id).ok_or_else(|| ReviewError::NotFound(item_id.to_string()))?;
            apply_review(item, decision, expected_version, vocab)?
        }
        Event::Adjudicated { decision, expected_version } => {
            let item = items.get(item_id).ok_or_else(|| ReviewError::NotFound(item_id.to_string()))?;
            apply_adjudication(item, decision, expected_version, vocab)?
        }
    };
    items.insert(item_id.to_string(), next.clone());
    Ok(next)
}

pub fn export_retained(items: &[ReviewItem]) -> Vec<ManifestEntry> {
    items
        .iter()
        .filter(|i| i.state == ReviewState::Retained)
        .map(|i| ManifestEntry::new(i.final_record().clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::fixtures::record;
    use crate::Language;

    fn vocab() -> TagVocabulary {
        TagVocabulary::default()
    }

    fn decision(who: &str, verdict: Verdict) -> ReviewDecision {
        let revision = (verdict == Verdict::Modify).then(|| {
            let mut r = record("u1", Language::En, "hello there");
            r.tone = format!("Revised by {who}");
            r
        });
        ReviewDecision { reviewer_id: who.into(), verdict, revision, timestamp_ms: 1 }
    }

    fn adjudication(consistent: bool) -> AdjudicationDecision {
        let final_revision = consistent.then(|| {
            let mut r = record("u1", Language::En, "hello there");
            r.tone = "Adjudicated tone".into();
            r
        });
        AdjudicationDecision { adjudicator_id: "senior".into(), consistent, final_revision, timestamp_ms: 1 }
    }

    /// Exhaustive: all verdict pairs, and both adjudication outcomes where
    /// they apply. Retained is reached only by (accept, accept) or a
    /// consistent adjudication.
    #[test]
    fn state_machine_is_exhaustively_correct() {
        use Verdict::*;
        let all = [AcceptUnmodified, Modify, Discard];
        let mut retained_paths = Vec::new();
        for a in all {
            for b in all {
                let item = ReviewItem::new(record("u1", Language::En, "hello there"));
                let one = apply_review(&item, decision("r1", a), 1, &vocab()).unwrap();
                assert_eq!(one.state, ReviewState::OneReviewed);
                let two = apply_review(&one, decision("r2", b), 2, &vocab()).unwrap();
                assert_eq!(two.version, 3);
                assert_eq!(two.state, resolve(a, b));
                if two.state == ReviewState::Adjudication {
                    for c in [true, false] {
                        let done = apply_adjudication(&two, adjudication(c), 3, &vocab()).unwrap();
                        if done.state == ReviewState::Retained {
                            retained_paths.push(format!("{a:?}+{b:?}+adjudicated"));
                            assert_eq!(done.final_record().tone, "Adjudicated tone");
                        }
                    }
                } else if two.state == ReviewState::Retained {
                    retained_paths.push(format!("{a:?}+{b:?}"));
                    assert_eq!(two.final_record(), &item.record);
                }
                assert!(matches!(
                    apply_adjudication(&two, adjudication(true), 3, &vocab()),
                    Err(ReviewError::InvalidState { .. })
                ) || two.state == ReviewState::Adjudication);
            }
        }
        assert_eq!(retained_paths, vec!["AcceptUnmodified+AcceptUnmodified", "Modify+Modify+adjudicated"]);
    }

    #[test]
    fn guards() {
        let q = ReviewQueue::in_memory(vocab());
        q.enqueue(record("u1", Language::En, "hello there")).unwrap();
        assert!(matches!(q.enqueue(record("u1", Language::En, "hi")), Err(ReviewError::DuplicateItem(_))));
        assert!(matches!(q.enqueue_json("{\"utterance_id\": \"x\"}"), Err(ReviewError::Validation(_))));
        q.submit_review("u1", decision("r1", Verdict::AcceptUnmodified), 1).unwrap();
        assert!(matches!(
            q.submit_review("u1", decision("r1", Verdict::AcceptUnmodified), 2),
            Err(ReviewError::DuplicateReviewer(_))
        ));
        assert!(matches!(
            q.submit_review("u1", decision("r2", Verdict::AcceptUnmodified), 1),
            Err(ReviewError::VersionConflict { expected: 1, actual: 2 })
        ));
        let bad = ReviewDecision { revision: None, ..decision("r2", Verdict::Modify) };
        assert!(matches!(q.submit_review("u1", bad, 2), Err(ReviewError::InvalidDecision(_))));
        assert!(matches!(q.submit_adjudication("u1", adjudication(true), 2), Err(ReviewError::InvalidState { .. })));
        assert!(matches!(q.submit_review("nope", decision("r2", Verdict::Discard), 1), Err(ReviewError::NotFound(_))));
    }

    #[test]
    fn blinding_and_queue() {
        let q = ReviewQueue::in_memory(vocab());
        q.enqueue(record("u1", Language::En, "hello there")).unwrap();
        q.submit_review("u1", decision("r1", Verdict::Modify), 1).unwrap();
        let view = &q.queue_for(Some("r2"), false)[0];
        assert_eq!(view.reviews_submitted, 1);
        assert!(view.reviews.is_none());
        assert!(q.queue_for(Some("r1"), false).is_empty());
        q.submit_review("u1", decision("r2", Verdict::Modify), 2).unwrap();
        assert_eq!(q.queue_for(Some("senior"), true).len(), 1);
        assert!(q.queue_for(Some("r1"), true).is_empty(), "reviewers cannot adjudicate their own item");
        assert!(ItemView::of(&q.get("u1").unwrap()).reviews.is_some());
        assert!(matches!(
            q.submit_adjudication("u1", AdjudicationDecision { adjudicator_id: "r1".into(), ..adjudication(false) }, 3),
            Err(ReviewError::InvalidDecision(_))
        ));
    }

    #[test]
    fn export_substitutes_revision() {
        let q = ReviewQueue::in_memory(vocab());
        assert!(q.export_retained().is_empty());
        for id in ["a", "b", "c"] {
            q.enqueue(record(id, Language::En, "hi")).unwrap();
        }
        let dec = |who: &str, v: Verdict, id: &str| {
            let mut d = decision(who, v);
            if let Some(r) = d.revision.as_mut() {
                r.utterance_id = id.into();
            }
            d
        };
        q.submit_review("a", dec("r1", Verdict::AcceptUnmodified, "a"), 1).unwrap();
        q.submit_review("a", dec("r2", Verdict::AcceptUnmodified, "a"), 2).unwrap();
        q.submit_review("b", dec("r1", Verdict::AcceptUnmodified, "b"), 1).unwrap();
        q.submit_review("b", dec("r2", Verdict::Modify, "b"), 2).unwrap();
        q.submit_review("c", dec("r1", Verdict::Modify, "c"), 1).unwrap();
        q.submit_review("c", dec("r2", Verdict::Modify, "c"), 2).unwrap();
        let mut adj = adjudication(true);
        adj.final_revision.as_mut().unwrap().utterance_id = "c".into();
        q.submit_adjudication("c", adj, 3).unwrap();
        let out = q.export_retained();
        let ids: Vec<&str> = out.iter().map(|e| e.record.utterance_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "c"]);
        assert_eq!(out[1].record.tone, "Adjudicated tone");
    }

    #[test]
    fn log_replay_restores_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("review.log.jsonl");
        {
            let q = ReviewQueue::open(&path, vocab()).unwrap();
            q.enqueue(record("u1", Language::En, "hello there")).unwrap();
            q.submit_review("u1", decision("r1", Verdict::Modify), 1).unwrap();
            q.submit_review("u1", decision("r2", Verdict::Modify), 2).unwrap();
            // A rejected mutation leaves no trace in the log.
            assert!(q.submit_review("u1", decision("r3", Verdict::Modify), 3).is_err());
        }
        let q = ReviewQueue::open(&path, vocab()).unwrap();
        let item = q.get("u1").unwrap();
        assert_eq!(item.state, ReviewState::Adjudication);
        assert_eq!(item.version, 3);
        q.submit_adjudication("u1", adjudication(false), 3).unwrap();
        drop(q);
        let q = ReviewQueue::open(&path, vocab()).unwrap();
        assert_eq!(q.get("u1").unwrap().state, ReviewState::Discarded);
    }

    #[test]
    fn stale_concurrent_submits_never_both_win() {
        let q = std::sync::Arc::new(ReviewQueue::in_memory(vocab()));
        q.enqueue(record("u1", Language::En, "hello there")).unwrap();
        let handles: Vec<_> = (0..8)
            .map(|i| {
                let q = q.clone();
                std::thread::spawn(move || q.submit_review("u1", decision(&format!("r{i}"), Verdict::AcceptUnmodified), 1).is_ok())
            })
            .collect();
        let wins = handles.into_iter().map(|h| h.join().unwrap()).filter(|w| *w).count();
        assert_eq!(wins, 1);
        assert_eq!(q.get("u1").unwrap().reviews.len(), 1);
    }
}
