//! Two-stage annotation against an annotator backend.
//!
//! Stage 1 (macro) sees a whole chunk with the upstream recognizer's
//! utterance list as priors. It calibrates timestamps, fixes transcripts and
//! adds the context-dependent attributes. Stage 2 (micro) sees one utterance
//! plus its stage-1 context and returns the full 14-dimension record.
//! Pre-segmented external corpora skip stage 1 and use their own metadata as
//! priors.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::backend::{
    audio_payload, call_with_retry, canonical_json, endpoints, sha256_hex, AudioMode, AudioRef, Backend,
    BackendError, BackendMetadata, RetryError, RetryPolicy,
};
use crate::chunker::{apply_cuts, ChunkError, ChunkPlan, TimedUtterance};
use crate::metrics;
use crate::par;
use crate::prompts::{self, PromptError, PromptTemplate};
use crate::schema::{
    validate_value, AnnotationRecord, Language, Provenance, TagVocabulary, ValidationError, ValidationErrors,
    SCHEMA_VERSION,
};

const EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Macro,
    Micro,
    Ingest,
}

/// One utterance as reported by the upstream recognizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorUtterance {
    pub id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub transcript: String,
    pub speaker_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Priors {
    pub audio: AudioRef,
    pub language: Language,
    pub chunk_start_s: f64,
    pub chunk_end_s: f64,
    pub utterances: Vec<PriorUtterance>,
}

/// A stage-1 output utterance. `prior_ids` lists the prior utterances it
/// calibrates (several when the annotator merged them).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedUtterance {
    pub prior_ids: Vec<String>,
    pub start_s: f64,
    pub end_s: f64,
    pub transcript: String,
    pub transcript_tagged: String,
    pub contextual_inference: String,
    pub background_sound: String,
    pub acoustic_environment: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedPrior {
    pub id: String,
    pub reason: String,
}

/// Before/after timestamps of one calibrated utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub prior_ids: Vec<String>,
    pub prior_start_s: f64,
    pub prior_end_s: f64,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Result {
    pub chunk_start_s: f64,
    pub chunk_end_s: f64,
    pub utterances: Vec<CalibratedUtterance>,
    pub dropped: Vec<DroppedPrior>,
    pub calibrations: Vec<Calibration>,
    pub prompt_template_id: String,
    pub metadata: BackendMetadata,
}

/// Field-level change a later stage made to an inherited value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldDiff {
    pub field: String,
    pub prior: String,
    pub refined: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Outcome {
    pub record: AnnotationRecord,
    pub refinements: Vec<FieldDiff>,
    pub prompt_template_id: String,
    pub metadata: BackendMetadata,
}

/// Identity of the utterance being annotated in stage 2 or ingest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceInput {
    pub utterance_id: String,
    pub audio: AudioRef,
    pub language: Language,
    pub duration_s: f64,
}

/// Original metadata of an externally segmented utterance.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IngestMetadata {
    pub transcript: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    #[serde(default, flatten)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("backend unavailable after {attempts} attempt(s): {detail}")]
    BackendUnavailable { attempts: u32, detail: String },
    #[error("backend rejected the request: {0}")]
    BackendRejected(String),
    #[error("unparseable annotator response: {0}")]
    UnparseableResponse(String),
    #[error("utterance {index} spans {start_s}..{end_s}, outside chunk bounds {lo}..{hi}")]
    TimestampOutOfBounds { index: usize, start_s: f64, end_s: f64, lo: f64, hi: f64 },
    #[error("utterance {index} is out of order or has end before start")]
    UnorderedTimestamps { index: usize },
    #[error("prior utterance {0} is neither calibrated, merged nor dropped")]
    UnaccountedPrior(String),
    #[error("prior utterance {0} is accounted for more than once")]
    DuplicateAccounting(String),
    #[error("response refers to unknown prior utterance {0}")]
    UnknownPrior(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("invalid record: {0}")]
    Validation(ValidationErrors),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("audio: {0}")]
    Audio(String),
}

impl From<RetryError> for AnnotateError {
    fn from(e: RetryError) -> Self {
        match e.last {
            BackendError::Unavailable(detail) => AnnotateError::BackendUnavailable { attempts: e.attempts, detail },
            BackendError::Rejected(detail) => AnnotateError::BackendRejected(detail),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnnotatorConfig {
    pub retry: RetryPolicy,
    pub audio_mode: AudioMode,
    pub vocab: TagVocabulary,
    /// Accepted chunk durations for stage 1, inclusive.
    pub chunk_duration_bounds: (f64, f64),
    pub stage1_template: PromptTemplate,
    pub stage2_template: PromptTemplate,
    pub ingest_template: PromptTemplate,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        Self {
            retry: RetryPolicy::default(),
            audio_mode: AudioMode::Reference,
            vocab: TagVocabulary::default(),
            // Fallback cuts can stretch a chunk to twice the 360 s maximum.
            chunk_duration_bounds: (0.0, 720.0),
            stage1_template: PromptTemplate::builtin(prompts::STAGE1_MACRO).expect("built-in"),
            stage2_template: PromptTemplate::builtin(prompts::STAGE2_MICRO).expect("built-in"),
            ingest_template: PromptTemplate::builtin(prompts::INGEST).expect("built-in"),
        }
    }
}

impl AnnotatorConfig {
    fn vocab_list(&self) -> String {
        self.vocab.categories().iter().map(|c| format!("<{c}>")).collect::<Vec<_>>().join(", ")
    }
}

fn exchange(
    backend: &dyn Backend,
    cfg: &AnnotatorConfig,
    stage: Stage,
    template: &PromptTemplate,
    prompt: String,
    priors: Value,
    audio: &AudioRef,
) -> Result<(Value, BackendMetadata), AnnotateError> {
    let audio = audio_payload(audio, cfg.audio_mode).map_err(|e| AnnotateError::Audio(e.to_string()))?;
    let request = json!({
        "stage": stage,
        "prompt_template_id": template.id,
        "prompt": prompt,
        "priors": priors,
        "audio": audio,
    });
    let ex = call_with_retry(backend, endpoints::ANNOTATE, &request, &cfg.retry)?;
    if !ex.response.is_object() {
        return Err(AnnotateError::UnparseableResponse("expected a JSON object".into()));
    }
    Ok((ex.response, ex.metadata))
}

#[derive(Deserialize)]
struct Stage1Wire {
    utterances: Vec<CalibratedUtterance>,
    #[serde(default)]
    dropped: Vec<DroppedPrior>,
}

/// Stage 1: calibrate one chunk against the recognizer's priors.
pub fn annotate_stage1(
    priors: &Stage1Priors,
    backend: &dyn Backend,
    cfg: &AnnotatorConfig,
) -> Result<Stage1Result, AnnotateError> {
    let (lo, hi) = (priors.chunk_start_s, priors.chunk_end_s);
    let duration = hi - lo;
    let (min_d, max_d) = cfg.chunk_duration_bounds;
    if !(duration > 0.0 && duration >= min_d - EPS && duration <= max_d + EPS) {
        return Err(AnnotateError::Precondition(format!(
            "chunk duration {duration:.3} s outside [{min_d}, {max_d}]"
        )));
    }
    if priors.utterances.is_empty() {
        return Err(AnnotateError::Precondition("stage-1 priors are empty".into()));
    }
    for u in &priors.utterances {
        if u.start_s < lo - EPS || u.end_s > hi + EPS || u.end_s < u.start_s {
            return Err(AnnotateError::Precondition(format!("prior {} lies outside the chunk", u.id)));
        }
    }

    let priors_json = serde_json::to_value(&priors.utterances).expect("priors serialize");
    let prompt = cfg.stage1_template.render(&[
        ("priors", &serde_json::to_string_pretty(&priors_json).expect("json")),
        ("tag_vocabulary", &cfg.vocab_list()),
    ])?;
    let wire_priors = json!({ "chunk_start_s": lo, "chunk_end_s": hi, "utterances": priors_json });
    let (response, metadata) =
        exchange(backend, cfg, Stage::Macro, &cfg.stage1_template, prompt, wire_priors, &priors.audio)?;
    let wire: Stage1Wire =
        serde_json::from_value(response).map_err(|e| AnnotateError::UnparseableResponse(e.to_string()))?;

    // Bounds and ordering.
    let mut prev_start = f64::NEG_INFINITY;
    for (index, u) in wire.utterances.iter().enumerate() {
        if u.start_s < lo - EPS || u.end_s > hi + EPS {
            return Err(AnnotateError::TimestampOutOfBounds { index, start_s: u.start_s, end_s: u.end_s, lo, hi });
        }
        if u.end_s < u.start_s || u.start_s < prev_start {
            return Err(AnnotateError::UnorderedTimestamps { index });
        }
        prev_start = u.start_s;
        check_tagged(&u.transcript, &u.transcript_tagged, priors.language, &cfg.vocab)?;
    }

    // Every prior accounted for exactly once.
    let by_id: HashMap<&str, &PriorUtterance> = priors.utterances.iter().map(|u| (u.id.as_str(), u)).collect();
    let mut seen: HashSet<&str> = HashSet::new();
    let claimed = wire
        .utterances
        .iter()
        .flat_map(|u| u.prior_ids.iter())
        .chain(wire.dropped.iter().map(|d| &d.id));
    for id in claimed {
        if !by_id.contains_key(id.as_str()) {
            return Err(AnnotateError::UnknownPrior(id.clone()));
        }
        if !seen.insert(id.as_str()) {
            return Err(AnnotateError::DuplicateAccounting(id.clone()));
        }
    }
    if let Some(missing) = priors.utterances.iter().find(|u| !seen.contains(u.id.as_str())) {
        return Err(AnnotateError::UnaccountedPrior(missing.id.clone()));
    }
    if let Some(u) = wire.utterances.iter().position(|u| u.prior_ids.is_empty()) {
        return Err(AnnotateError::UnparseableResponse(format!("utterance {u} has no prior_ids")));
    }

    let calibrations = wire
        .utterances
        .iter()
        .map(|u| {
            let spans = u.prior_ids.iter().map(|id| by_id[id.as_str()]);
            let (ps, pe) = spans.fold((f64::INFINITY, f64::NEG_INFINITY), |(s, e), p| (s.min(p.start_s), e.max(p.end_s)));
            Calibration { prior_ids: u.prior_ids.clone(), prior_start_s: ps, prior_end_s: pe, start_s: u.start_s, end_s: u.end_s }
        })
        .collect();
    for d in &wire.dropped {
        tracing::info!(prior = %d.id, reason = %d.reason, "stage 1 dropped prior utterance");
    }

    Ok(Stage1Result {
        chunk_start_s: lo,
        chunk_end_s: hi,
        utterances: wire.utterances,
        dropped: wire.dropped,
        calibrations,
        prompt_template_id: cfg.stage1_template.id.clone(),
        metadata,
    })
}

fn check_tagged(transcript: &str, tagged: &str, language: Language, vocab: &TagVocabulary) -> Result<(), AnnotateError> {
    let tokens = metrics::tokenize(tagged, language, vocab).map_err(|e| {
        AnnotateError::Validation(
            match e {
                metrics::TokenizeError::UnknownTag(n) => ValidationError::UnknownTag(n),
                other => ValidationError::MalformedTag(other.to_string()),
            }
            .into(),
        )
    })?;
    let plain = metrics::tokenize_lenient(transcript, language, vocab);
    if metrics::text_tokens(&tokens) != metrics::text_tokens(&plain) {
        return Err(AnnotateError::Validation(ValidationError::TagTranscriptMismatch.into()));
    }
    Ok(())
}

/// Context inherited from stage 1 by one utterance.
pub fn macro_context(u: &CalibratedUtterance) -> Value {
    json!({
        "start_s": u.start_s,
        "end_s": u.end_s,
        "transcript": u.transcript,
        "transcript_tagged": u.transcript_tagged,
        "contextual_inference": u.contextual_inference,
        "background_sound": u.background_sound,
        "acoustic_environment": u.acoustic_environment,
    })
}

const MACRO_FIELDS: [&str; 5] =
    ["transcript", "transcript_tagged", "contextual_inference", "background_sound", "acoustic_environment"];

/// Overlays identity fields onto the annotator's document and validates it.
fn finish_record(
    mut response: Value,
    input: &UtteranceInput,
    provenance: Provenance,
    vocab: &TagVocabulary,
) -> Result<AnnotationRecord, AnnotateError> {
    let obj = response.as_object_mut().expect("checked by exchange");
    obj.insert("utterance_id".into(), json!(input.utterance_id));
    obj.insert("audio_path".into(), json!(input.audio.path));
    obj.insert("language".into(), json!(input.language));
    obj.insert("duration_s".into(), json!(input.duration_s));
    obj.insert("schema_version".into(), json!(SCHEMA_VERSION));
    obj.insert("provenance".into(), json!(provenance));
    // The annotator marks events inline; positions are derived here when the
    // explicit list is absent.
    if !obj.contains_key("paralinguistic_events") {
        if let Some(Value::String(tagged)) = obj.get("transcript_tagged") {
            if let Ok(tokens) = metrics::tokenize(tagged, input.language, vocab) {
                let tags = crate::schema::Tag::from_tokens(&tokens);
                obj.insert("paralinguistic_events".into(), serde_json::to_value(tags).expect("tags serialize"));
            }
        }
    }
    validate_value(&response, vocab).map_err(AnnotateError::Validation)
}

fn diff_fields(prior: &Value, record: &AnnotationRecord, fields: &[&str]) -> Vec<FieldDiff> {
    let rec = record.to_value();
    fields
        .iter()
        .filter_map(|f| {
            let before = prior.get(*f)?.as_str()?;
            let after = rec.get(*f)?.as_str()?;
            (before != after).then(|| FieldDiff { field: f.to_string(), prior: before.into(), refined: after.into() })
        })
        .collect()
}

fn log_refinements(id: &str, diffs: &[FieldDiff]) {
    for d in diffs {
        tracing::info!(utterance = id, field = %d.field, prior = %d.prior, refined = %d.refined, "refined inherited attribute");
    }
}

/// Stage 2: full record for one calibrated utterance. Takes the validated
/// stage-1 result, so a stage-2 request cannot precede stage 1.
pub fn annotate_stage2(
    stage1: &Stage1Result,
    index: usize,
    input: &UtteranceInput,
    backend: &dyn Backend,
    cfg: &AnnotatorConfig,
) -> Result<Stage2Outcome, AnnotateError> {
    let utt = stage1
        .utterances
        .get(index)
        .ok_or_else(|| AnnotateError::Precondition(format!("stage-1 result has no utterance {index}")))?;
    let context = macro_context(utt);
    let prompt = cfg.stage2_template.render(&[
        ("macro_context", &serde_json::to_string_pretty(&context).expect("json")),
        ("tag_vocabulary", &cfg.vocab_list()),
    ])?;
    let (response, metadata) =
        exchange(backend, cfg, Stage::Micro, &cfg.stage2_template, prompt, context.clone(), &input.audio)?;
    let record = finish_record(response, input, Provenance::PipelineStage2, &cfg.vocab)?;
    let refinements = diff_fields(&context, &record, &MACRO_FIELDS);
    log_refinements(&record.utterance_id, &refinements);
    Ok(Stage2Outcome { record, refinements, prompt_template_id: cfg.stage2_template.id.clone(), metadata })
}

/// External ingest: a pre-segmented utterance annotated with its original
/// metadata as priors.
pub fn ingest_presegmented(
    input: &UtteranceInput,
    metadata: &IngestMetadata,
    backend: &dyn Backend,
    cfg: &AnnotatorConfig,
) -> Result<Stage2Outcome, AnnotateError> {
    if metadata.transcript.trim().is_empty() {
        return Err(AnnotateError::Precondition("ingest metadata has no transcript".into()));
    }
    let priors = serde_json::to_value(metadata).expect("metadata serializes");
    let prompt = cfg.ingest_template.render(&[
        ("priors", &serde_json::to_string_pretty(&priors).expect("json")),
        ("tag_vocabulary", &cfg.vocab_list()),
    ])?;
    let (response, backend_meta) =
        exchange(backend, cfg, Stage::Ingest, &cfg.ingest_template, prompt, priors, &input.audio)?;
    let record = finish_record(response, input, Provenance::ExternalIngest, &cfg.vocab)?;
    let mut prior_fields = json!({ "transcript": metadata.transcript });
    if let Some(c) = &metadata.context {
        prior_fields["contextual_inference"] = json!(c);
    }
    let refinements = diff_fields(&prior_fields, &record, &["transcript", "contextual_inference"]);
    log_refinements(&record.utterance_id, &refinements);
    Ok(Stage2Outcome {
        record,
        refinements,
        prompt_template_id: cfg.ingest_template.id.clone(),
        metadata: backend_meta,
    })
}

// ---------------------------------------------------------------------------
// Batch pipeline

/// A chunk produced by the chunker, with the recognizer's utterances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkJob {
    pub chunk_id: String,
    pub audio_path: String,
    pub language: Language,
    pub start_s: f64,
    pub end_s: f64,
    pub priors: Vec<PriorUtterance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestJob {
    pub utterance_id: String,
    pub audio_path: String,
    pub language: Language,
    pub duration_s: f64,
    pub metadata: IngestMetadata,
}

/// One line of an annotation work manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Job {
    Chunk(ChunkJob),
    Ingest(IngestJob),
}

impl Job {
    pub fn key(&self) -> String {
        sha256_hex(canonical_json(&serde_json::to_value(self).expect("job serializes")).as_bytes())
    }

    pub fn name(&self) -> &str {
        match self {
            Job::Chunk(c) => &c.chunk_id,
            Job::Ingest(i) => &i.utterance_id,
        }
    }
}

pub fn parse_jobs(text: &str) -> Result<Vec<Job>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineMode {
    /// Stage 1 only, for chunk jobs.
    Stage1,
    /// Stage 2 for chunks whose stage-1 result is already stored.
    Stage2,
    /// Ingest jobs only.
    Ingest,
    /// Everything.
    Full,
}

#[derive(Serialize, Deserialize)]
struct StoredLine<T> {
    key: String,
    value: T,
}

/// Single-writer store of finished work, keyed by content hash. With a
/// directory it persists as append-only JSONL and is replayed on open.
pub struct AnnotationStore {
    dir: Option<PathBuf>,
    inner: Mutex<StoreInner>,
}

#[derive(Default)]
struct StoreInner {
    stage1: HashMap<String, Stage1Result>,
    records: HashMap<String, AnnotationRecord>,
}

const STAGE1_FILE: &str = "stage1.jsonl";
const RECORDS_FILE: &str = "records.jsonl";

impl AnnotationStore {
    pub fn in_memory() -> Self {
        Self { dir: None, inner: Mutex::new(StoreInner::default()) }
    }

    /// Opens (creating if needed) a store directory. Lines that no longer
    /// parse or validate are ignored, so their items are redone.
    pub fn open(dir: impl AsRef<Path>, vocab: &TagVocabulary) -> std::io::Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let mut inner = StoreInner::default();
        if let Ok(text) = std::fs::read_to_string(dir.join(STAGE1_FILE)) {
            for line in text.lines() {
                if let Ok(l) = serde_json::from_str::<StoredLine<Stage1Result>>(line) {
                    inner.stage1.insert(l.key, l.value);
                }
            }
        }
        if let Ok(text) = std::fs::read_to_string(dir.join(RECORDS_FILE)) {
            for line in text.lines() {
                if let Ok(l) = serde_json::from_str::<StoredLine<Value>>(line) {
                    if let Ok(r) = validate_value(&l.value, vocab) {
                        inner.records.insert(l.key, r);
                    }
                }
            }
        }
        Ok(Self { dir: Some(dir), inner: Mutex::new(inner) })
    }

    fn append<T: Serialize>(&self, file: &str, key: &str, value: &T) -> std::io::Result<()> {
        if let Some(dir) = &self.dir {
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(dir.join(file))?;
            let line = serde_json::to_string(&StoredLine { key: key.to_string(), value }).expect("serializes");
            writeln!(f, "{line}")?;
        }
        Ok(())
    }

    pub fn stage1(&self, key: &str) -> Option<Stage1Result> {
        self.inner.lock().unwrap().stage1.get(key).cloned()
    }

    pub fn record(&self, key: &str) -> Option<AnnotationRecord> {
        self.inner.lock().unwrap().records.get(key).cloned()
    }

    pub fn put_stage1(&self, key: &str, result: &Stage1Result) -> std::io::Result<()> {
        let mut inner = self.inner.lock().unwrap();
        self.append(STAGE1_FILE, key, result)?;
        inner.stage1.insert(key.to_string(), result.clone());
        Ok(())
    }

    pub fn put_record(&self, key: &str, record: &AnnotationRecord) -> std::io::Result<()> {
        let mut inner = self.inner.lock().unwrap();
        self.append(RECORDS_FILE, key, record)?;
        inner.records.insert(key.to_string(), record.clone());
        Ok(())
    }

    pub fn record_count(&self) -> usize {
        self.inner.lock().unwrap().records.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub item: String,
    pub stage: Stage,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    /// Finished records in job order (fresh and previously stored).
    pub records: Vec<AnnotationRecord>,
    pub failures: Vec<Failure>,
    /// Items answered from the store without a backend call.
    pub reused: usize,
    pub refinements: usize,
}

/// Chunk jobs for one recording: each planned chunk with the prior
/// utterances that fall inside it. Priors get ids `{recording}_p{k:04}` in
/// input order; a missing speaker id becomes `S0`.
pub fn chunk_jobs(
    recording_id: &str,
    audio_path: &str,
    language: Language,
    plan: &ChunkPlan,
    priors: &[TimedUtterance],
) -> Result<Vec<ChunkJob>, ChunkError> {
    let numbered: Vec<(usize, TimedUtterance)> = priors.iter().cloned().enumerate().collect();
    let chunks = apply_cuts(plan, &numbered)?;
    Ok(chunks
        .into_iter()
        .map(|c| ChunkJob {
            chunk_id: format!("{recording_id}_c{:03}", c.index),
            audio_path: audio_path.to_string(),
            language,
            start_s: c.start_s,
            end_s: c.end_s,
            priors: c
                .members
                .into_iter()
                .map(|(k, u)| PriorUtterance {
                    id: format!("{recording_id}_p{k:04}"),
                    start_s: u.start_s,
                    end_s: u.end_s,
                    transcript: u.text.unwrap_or_default(),
                    speaker_id: u.speaker_id.unwrap_or_else(|| "S0".to_string()),
                })
                .collect(),
        })
        .collect())
}

/// Utterance id of the `index`-th calibrated utterance of a chunk.
pub fn chunk_utterance_id(chunk_id: &str, index: usize) -> String {
    format!("{chunk_id}_{index:03}")
}

fn utterance_key(chunk_key: &str, u: &CalibratedUtterance) -> String {
    sha256_hex(format!("{chunk_key}\n{}", canonical_json(&serde_json::to_value(u).expect("json"))).as_bytes())
}

enum Step {
    Stage1 { job: usize, key: String, result: Option<Stage1Result> },
    Done(Vec<(usize, AnnotationRecord)>, bool),
    Failed(Failure),
}

/// Annotates a batch. Failures are isolated per item and reported; finished
/// work is stored, so a re-run only calls the backend for what is missing.
pub fn run_pipeline(
    jobs: &[Job],
    backend: &dyn Backend,
    cfg: &AnnotatorConfig,
    concurrency: usize,
    mode: PipelineMode,
    store: &AnnotationStore,
) -> PipelineReport {
    let want_chunks = mode != PipelineMode::Ingest;
    let want_ingest = matches!(mode, PipelineMode::Ingest | PipelineMode::Full);
    let want_stage2 = matches!(mode, PipelineMode::Stage2 | PipelineMode::Full);

    // Phase A: stage 1 for chunks, complete annotation for ingest jobs.
    let phase_a: Vec<Option<Step>> = par::map_bounded(concurrency, &(0..jobs.len()).collect::<Vec<_>>(), |&i| {
        let job = &jobs[i];
        let key = job.key();
        match job {
            Job::Chunk(c) if want_chunks => {
                if let Some(r) = store.stage1(&key) {
                    return Some(Step::Stage1 { job: i, key, result: Some(r) });
                }
                if mode == PipelineMode::Stage2 {
                    return Some(Step::Failed(Failure {
                        item: c.chunk_id.clone(),
                        stage: Stage::Micro,
                        error: "no validated stage-1 result for this chunk".into(),
                    }));
                }
                let priors = Stage1Priors {
                    audio: AudioRef::span(&c.audio_path, c.start_s, c.end_s),
                    language: c.language,
                    chunk_start_s: c.start_s,
                    chunk_end_s: c.end_s,
                    utterances: c.priors.clone(),
                };
                match annotate_stage1(&priors, backend, cfg) {
                    Ok(r) => {
                        if let Err(e) = store.put_stage1(&key, &r) {
                            tracing::warn!(chunk = %c.chunk_id, error = %e, "could not persist stage-1 result");
                        }
                        Some(Step::Stage1 { job: i, key, result: None })
                    }
                    Err(e) => Some(Step::Failed(Failure { item: c.chunk_id.clone(), stage: Stage::Macro, error: e.to_string() })),
                }
            }
            Job::Ingest(j) if want_ingest => {
                if let Some(r) = store.record(&key) {
                    return Some(Step::Done(vec![(0, r)], true));
                }
                let input = UtteranceInput {
                    utterance_id: j.utterance_id.clone(),
                    audio: AudioRef::file(&j.audio_path),
                    language: j.language,
                    duration_s: j.duration_s,
                };
                match ingest_presegmented(&input, &j.metadata, backend, cfg) {
                    Ok(out) => {
                        if let Err(e) = store.put_record(&key, &out.record) {
                            tracing::warn!(item = %j.utterance_id, error = %e, "could not persist record");
                        }
                        Some(Step::Done(vec![(out.refinements.len(), out.record)], false))
                    }
                    Err(e) => Some(Step::Failed(Failure { item: j.utterance_id.clone(), stage: Stage::Ingest, error: e.to_string() })),
                }
            }
            _ => None,
        }
    });

    // Phase B: stage 2 for every utterance of every validated chunk.
    struct Work<'a> {
        order: (usize, usize),
        chunk: &'a ChunkJob,
        key: String,
        stage1: Stage1Result,
        index: usize,
    }
    let mut report = PipelineReport::default();
    let mut finished: Vec<((usize, usize), AnnotationRecord)> = Vec::new();
    let mut work: Vec<Work> = Vec::new();
    for (pos, step) in phase_a.into_iter().enumerate() {
        match step {
            None => {}
            Some(Step::Failed(f)) => report.failures.push(f),
            Some(Step::Done(recs, reused)) => {
                report.reused += reused as usize;
                for (refinements, r) in recs {
                    report.refinements += refinements;
                    finished.push(((pos, 0), r));
                }
            }
            Some(Step::Stage1 { job, key, result }) => {
                let Job::Chunk(chunk) = &jobs[job] else { unreachable!() };
                report.reused += result.is_some() as usize;
                let stage1 = match result.or_else(|| store.stage1(&key)) {
                    Some(r) => r,
                    None => continue,
                };
                if !want_stage2 {
                    continue;
                }
                for index in 0..stage1.utterances.len() {
                    work.push(Work { order: (pos, index), chunk, key: key.clone(), stage1: stage1.clone(), index });
                }
            }
        }
    }

    let phase_b = par::map_bounded(concurrency, &work, |w| {
        let u = &w.stage1.utterances[w.index];
        let key = utterance_key(&w.key, u);
        let id = chunk_utterance_id(&w.chunk.chunk_id, w.index);
        if let Some(r) = store.record(&key) {
            return Ok((r, 0, true));
        }
        let input = UtteranceInput {
            utterance_id: id.clone(),
            audio: AudioRef::span(&w.chunk.audio_path, u.start_s, u.end_s),
            language: w.chunk.language,
            duration_s: u.end_s - u.start_s,
        };
        match annotate_stage2(&w.stage1, w.index, &input, backend, cfg) {
            Ok(out) => {
                if let Err(e) = store.put_record(&key, &out.record) {
                    tracing::warn!(item = %id, error = %e, "could not persist record");
                }
                Ok((out.record, out.refinements.len(), false))
            }
            Err(e) => Err(Failure { item: id, stage: Stage::Micro, error: e.to_string() }),
        }
    });
    for (w, res) in work.iter().zip(phase_b) {
        match res {
            Ok((r, refinements, reused)) => {
                report.reused += reused as usize;
                report.refinements += refinements;
                finished.push((w.order, r));
            }
            Err(f) => report.failures.push(f),
        }
    }
    finished.sort_by_key(|(o, _)| *o);
    report.records = finished.into_iter().map(|(_, r)| r).collect();
    report
}
