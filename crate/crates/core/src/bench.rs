//! Benchmark construction: admission, stratified sampling, MCQ generation
//! with typed distractors, control-sample injection, and packaging.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{call_with_retry, endpoints, AudioRef, Backend, RetryPolicy};
use crate::crossval::normalize_words;
use crate::par;
use crate::prompts::{self, PromptTemplate};
use crate::schema::{AnnotationRecord, AttributeDimension, Language, ManifestEntry};

pub const ADMIT_MAX_ERR: f64 = 0.10;
pub const ADMIT_MIN_DURATION_S: f64 = 3.0;
pub const DEFAULT_N_OPTIONS: usize = 5;
pub const MIN_OPTIONS: usize = 4;
pub const DEFAULT_CONTROL_FRACTION: f64 = 0.2;

/// Sub-seed for a named purpose, so that independent draws never share a
/// random stream and adding one draw does not perturb the others.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}\u{1f}{label}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}

/// Default question stem of each dimension (the TPT entry is its prompt).
pub fn default_stem(dim: AttributeDimension) -> &'static str {
    use AttributeDimension::*;
    match dim {
        Gen => "What is the gender of the speaker in this speech?",
        Age => "Based on the speaker's voice, what is their perceived age group?",
        Acc => "Which of the following best describes the speaker's accent?",
        Pit => "Please determine the pitch characteristics of this speech.",
        Sr => "What are the speaking rate characteristics of this speech?",
        Rhy => "Analyze the rhythmic features of the speaker's speech.",
        Vt => "How would you describe the physical texture of the speaker's voice?",
        Emo => "Based on the vocal performance and textual context, what is the main emotion conveyed?",
        Ton => "What are the tonal characteristics of the voice in the speech?",
        Ci => "Based on the vocal performance, what could be the context of this speech?",
        Bs => "Which of the following is the most accurate description of the speech's background sound?",
        Ae => "Based on the reverberation and sense of space, what is the most likely acoustic physical environment?",
        Pe => "Which of the following paralinguistic events is present in the speech?",
        Tpt => "Please transcribe the speech into text and provide tags for the paralinguistic events at their occurrence positions.",
    }
}

// ---------------------------------------------------------------------------
// Admission

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissionConfig {
    /// Admitted iff err < max_err (strict).
    pub max_err: f64,
    /// Admitted iff duration >= min_duration_s (inclusive).
    pub min_duration_s: f64,
    /// Quality key holding the re-transcription error.
    pub err_key: String,
}

impl Default for AdmissionConfig {
    fn default() -> Self {
        Self { max_err: ADMIT_MAX_ERR, min_duration_s: ADMIT_MIN_DURATION_S, err_key: "wer".into() }
    }
}

/// The measurements admission was decided on, carried by every item.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmissionEvidence {
    pub err: f64,
    pub duration_s: f64,
}

impl AdmissionEvidence {
    pub fn passes(&self, cfg: &AdmissionConfig) -> bool {
        self.err < cfg.max_err && self.duration_s >= cfg.min_duration_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AdmissionRejection {
    ErrTooHigh(f64),
    MissingErr,
    TooShort(f64),
}

pub fn admit(entry: &ManifestEntry, cfg: &AdmissionConfig) -> Result<AdmissionEvidence, AdmissionRejection> {
    let err = entry.quality_score(&cfg.err_key).ok_or(AdmissionRejection::MissingErr)?;
    if !(err < cfg.max_err) {
        return Err(AdmissionRejection::ErrTooHigh(err));
    }
    let d = entry.record.duration_s;
    if d < cfg.min_duration_s {
        return Err(AdmissionRejection::TooShort(d));
    }
    Ok(AdmissionEvidence { err, duration_s: d })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Admitted {
    pub entry: ManifestEntry,
    pub evidence: AdmissionEvidence,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdmissionOutcome {
    pub admitted: Vec<Admitted>,
    pub rejected: Vec<(String, AdmissionRejection)>,
}

pub fn admit_candidates(entries: &[ManifestEntry], cfg: &AdmissionConfig) -> AdmissionOutcome {
    let mut out = AdmissionOutcome::default();
    for e in entries {
        match admit(e, cfg) {
            Ok(evidence) => out.admitted.push(Admitted { entry: e.clone(), evidence }),
            Err(r) => out.rejected.push((e.record.utterance_id.clone(), r)),
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Stratified sampling

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Stratum {
    pub dimension: AttributeDimension,
    pub language: Language,
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.dimension.abbrev(), self.language)
    }
}

/// Items wanted per stratum.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Targets(pub BTreeMap<Stratum, usize>);

impl Targets {
    /// `{"GEN": {"ZH": 932, "EN": 911}, ...}`
    pub fn from_json(text: &str) -> Result<Self, String> {
        let raw: BTreeMap<String, BTreeMap<String, usize>> = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let mut t = BTreeMap::new();
        for (dim, per_lang) in raw {
            let dimension: AttributeDimension = dim.parse().map_err(|e: String| e)?;
            for (lang, n) in per_lang {
                let language: Language = lang.parse().map_err(|e: String| e)?;
                t.insert(Stratum { dimension, language }, n);
            }
        }
        Ok(Targets(t))
    }

    pub fn to_json(&self) -> Value {
        let mut out: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
        for (s, n) in &self.0 {
            out.entry(s.dimension.abbrev()).or_default().insert(s.language.code(), *n);
        }
        serde_json::to_value(out).expect("serializes")
    }

    /// The same target for all 28 strata.
    pub fn uniform(n: usize) -> Self {
        let mut t = BTreeMap::new();
        for dimension in AttributeDimension::ALL {
            for language in [Language::Zh, Language::En] {
                t.insert(Stratum { dimension, language }, n);
            }
        }
        Targets(t)
    }

    /// Published per-stratum sizes (ZH, EN).
    pub fn published() -> Self {
        use AttributeDimension::*;
        let sizes = [
            (Gen, 932, 911),
            (Age, 787, 728),
            (Acc, 1000, 900),
            (Pit, 853, 958),
            (Sr, 821, 907),
            (Rhy, 999, 979),
            (Vt, 999, 981),
            (Emo, 986, 815),
            (Ton, 997, 984),
            (Ci, 999, 996),
            (Bs, 523, 503),
            (Ae, 504, 504),
            (Pe, 976, 778),
            (Tpt, 976, 778),
        ];
        let mut t = BTreeMap::new();
        for (dimension, zh, en) in sizes {
            t.insert(Stratum { dimension, language: Language::Zh }, zh);
            t.insert(Stratum { dimension, language: Language::En }, en);
        }
        Targets(t)
    }
}

/// Whether a record can serve a dimension. Paralinguistic dimensions need at
/// least one event; every other dimension is always populated.
pub fn eligible(record: &AnnotationRecord, dim: AttributeDimension) -> bool {
    match dim {
        AttributeDimension::Pe | AttributeDimension::Tpt => !record.paralinguistic_events.is_empty(),
        _ => true,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub stratum: Stratum,
    pub target: usize,
    pub available: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sample {
    pub strata: BTreeMap<Stratum, Vec<Admitted>>,
    pub shortfalls: Vec<Shortfall>,
}

/// Draws min(target, available) records per stratum with a per-stratum
/// seeded stream. Candidates are ordered by utterance id first, so the
/// result does not depend on input order.
pub fn stratified_sample(admitted: &[Admitted], targets: &Targets, seed: u64) -> Sample {
    let mut sample = Sample::default();
    for (&stratum, &target) in &targets.0 {
        let mut pool: Vec<&Admitted> = admitted
            .iter()
            .filter(|a| a.entry.record.language == stratum.language && eligible(&a.entry.record, stratum.dimension))
            .collect();
        pool.sort_by(|a, b| a.entry.record.utterance_id.cmp(&b.entry.record.utterance_id));
        let n = target.min(pool.len());
        if n < target {
            tracing::warn!(%stratum, target, available = pool.len(), "stratum short of target");
            sample.shortfalls.push(Shortfall { stratum, target, available: pool.len() });
        }
        let mut rng = rng_for(seed, &format!("sample/{stratum}"));
        let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), n).into_vec();
        picked.sort_unstable();
        sample.strata.insert(stratum, picked.into_iter().map(|i| pool[i].clone()).collect());
    }
    sample
}

// ---------------------------------------------------------------------------
// MCQ items

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OptionClass {
    GroundTruth,
    FineGrainedAcoustic,
    SemanticTrap,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqOption {
    pub text: String,
    pub klass: OptionClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqItem {
    pub item_id: String,
    pub dimension: AttributeDimension,
    pub language: Language,
    pub audio: AudioRef,
    pub source_utterance_id: String,
    pub stem: String,
    pub options: Vec<McqOption>,
    pub answer_index: usize,
    #[serde(default)]
    pub semantic_conflict: bool,
    pub admission: AdmissionEvidence,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum McqInvalid {
    #[error("duplicate option text `{0}`")]
    DuplicateOption(String),
    #[error("more than one option is flagged correct")]
    MultipleKeys,
    #[error("no option is flagged correct")]
    NoKey,
    #[error("{got} options, at least {min} required")]
    TooFewOptions { got: usize, min: usize },
    #[error("option {0}: class GroundTruth must coincide with the correct flag")]
    KlassMismatch(usize),
    #[error("transcript/acoustics conflict is flagged but no SemanticTrap distractor is present")]
    MissingSemanticTrap,
    #[error("the keyed option does not state the ground truth")]
    KeyMismatch,
    #[error("empty stem or option text")]
    EmptyText,
    #[error("TPT is not posed as a multiple-choice question")]
    NotMcqDimension,
    #[error("unparseable generator response: {0}")]
    Unparseable(String),
}

fn same_text(a: &str, b: &str) -> bool {
    normalize_words(a) == normalize_words(b)
}

impl McqItem {
    /// Structural invariants of a finished item.
    pub fn validate(&self, min_options: usize) -> Result<(), McqInvalid> {
        if !self.dimension.is_mcq() {
            return Err(McqInvalid::NotMcqDimension);
        }
        let flags: Vec<bool> = (0..self.options.len()).map(|i| i == self.answer_index).collect();
        if self.answer_index >= self.options.len() {
            return Err(McqInvalid::NoKey);
        }
        check_options(&self.stem, &self.options, &flags, self.semantic_conflict, min_options)
    }

    pub fn key_text(&self) -> &str {
        &self.options[self.answer_index].text
    }

    pub fn option_texts(&self) -> Vec<&str> {
        self.options.iter().map(|o| o.text.as_str()).collect()
    }
}

fn check_options(
    stem: &str,
    options: &[McqOption],
    correct: &[bool],
    semantic_conflict: bool,
    min_options: usize,
) -> Result<(), McqInvalid> {
    if options.len() < min_options {
        return Err(McqInvalid::TooFewOptions { got: options.len(), min: min_options });
    }
    if stem.trim().is_empty() || options.iter().any(|o| normalize_words(&o.text).is_empty()) {
        return Err(McqInvalid::EmptyText);
    }
    match correct.iter().filter(|c| **c).count() {
        0 => return Err(McqInvalid::NoKey),
        1 => {}
        _ => return Err(McqInvalid::MultipleKeys),
    }
    for (i, (o, c)) in options.iter().zip(correct).enumerate() {
        if (o.klass == OptionClass::GroundTruth) != *c {
            return Err(McqInvalid::KlassMismatch(i));
        }
    }
    for (i, a) in options.iter().enumerate() {
        if options[..i].iter().any(|b| same_text(&a.text, &b.text)) {
            return Err(McqInvalid::DuplicateOption(a.text.clone()));
        }
    }
    if semantic_conflict && !options.iter().any(|o| o.klass == OptionClass::SemanticTrap) {
        return Err(McqInvalid::MissingSemanticTrap);
    }
    Ok(())
}

#[derive(Deserialize)]
struct WireOption {
    text: String,
    klass: OptionClass,
    correct: bool,
}

#[derive(Deserialize)]
struct WireMcq {
    #[serde(default)]
    stem: Option<String>,
    options: Vec<WireOption>,
    #[serde(default)]
    semantic_conflict: bool,
}

#[derive(Debug, Clone)]
pub struct McqConfig {
    pub n_options: usize,
    pub min_options: usize,
    /// Generation attempts per item before it is dropped.
    pub attempts: u32,
    pub retry: RetryPolicy,
    pub template: PromptTemplate,
}

impl Default for McqConfig {
    fn default() -> Self {
        Self {
            n_options: DEFAULT_N_OPTIONS,
            min_options: MIN_OPTIONS,
            attempts: 3,
            retry: RetryPolicy::default(),
            template: PromptTemplate::builtin(prompts::MCQ_GENERATE).expect("built-in"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GenerationError {
    #[error("generation invalid after {attempts} attempt(s): {last}")]
    GenerationInvalid { attempts: u32, last: McqInvalid },
    #[error("generator backend: {0}")]
    Backend(String),
    #[error("precondition: {0}")]
    Precondition(String),
}

pub fn item_id(stratum: Stratum, utterance_id: &str) -> String {
    format!("{}-{}-{}", stratum.dimension.abbrev().to_lowercase(), stratum.language.code().to_lowercase(), utterance_id)
}

/// Asks the generator for stem and options, validates them, and shuffles
/// the options with a seed derived from the item id.
pub fn generate_mcq(
    admitted: &Admitted,
    dim: AttributeDimension,
    backend: &dyn Backend,
    cfg: &McqConfig,
    seed: u64,
) -> Result<McqItem, GenerationError> {
    let record = &admitted.entry.record;
    if !dim.is_mcq() {
        return Err(GenerationError::Precondition("TPT is not posed as a multiple-choice question".into()));
    }
    let truth = record.dimension_text(dim);
    if truth.trim().is_empty() {
        return Err(GenerationError::Precondition(format!("record lacks {}", dim.abbrev())));
    }
    let stratum = Stratum { dimension: dim, language: record.language };
    let id = item_id(stratum, &record.utterance_id);
    let n = cfg.n_options.to_string();
    let prompt = cfg
        .template
        .render(&[
            ("dimension", dim.display_name()),
            ("ground_truth", &truth),
            ("transcript", &record.transcript),
            ("n_options", &n),
        ])
        .map_err(|e| GenerationError::Precondition(e.to_string()))?;

    let mut last = McqInvalid::NoKey;
    for attempt in 1..=cfg.attempts.max(1) {
        let request = json!({
            "item_id": id,
            "dimension": dim.abbrev(),
            "language": record.language,
            "ground_truth": truth,
            "transcript": record.transcript,
            "n_options": cfg.n_options,
            "attempt": attempt,
            "prompt_template_id": cfg.template.id,
            "prompt": prompt,
            "audio": AudioRef::file(&record.audio_path),
        });
        let response = call_with_retry(backend, endpoints::GENERATE_MCQ, &request, &cfg.retry)
            .map_err(|e| GenerationError::Backend(e.to_string()))?
            .response;
        match assemble(&id, dim, admitted, &truth, response, cfg, seed) {
            Ok(item) => return Ok(item),
            Err(e) => {
                tracing::debug!(item = %id, attempt, error = %e, "rejected MCQ generation");
                last = e;
            }
        }
    }
    Err(GenerationError::GenerationInvalid { attempts: cfg.attempts.max(1), last })
}

fn assemble(
    id: &str,
    dim: AttributeDimension,
    admitted: &Admitted,
    truth: &str,
    response: Value,
    cfg: &McqConfig,
    seed: u64,
) -> Result<McqItem, McqInvalid> {
    let record = &admitted.entry.record;
    let wire: WireMcq = serde_json::from_value(response).map_err(|e| McqInvalid::Unparseable(e.to_string()))?;
    let stem = wire.stem.filter(|s| !s.trim().is_empty()).unwrap_or_else(|| default_stem(dim).to_string());
    let correct: Vec<bool> = wire.options.iter().map(|o| o.correct).collect();
    let mut options: Vec<McqOption> =
        wire.options.into_iter().map(|o| McqOption { text: o.text, klass: o.klass }).collect();
    check_options(&stem, &options, &correct, wire.semantic_conflict, cfg.min_options)?;
    let key = correct.iter().position(|c| *c).expect("exactly one key");
    if !same_text(&options[key].text, truth) {
        return Err(McqInvalid::KeyMismatch);
    }
    let key_text = options[key].text.clone();
    options.shuffle(&mut rng_for(seed, &format!("options/{id}")));
    let answer_index = options.iter().position(|o| o.text == key_text).expect("key survives shuffle");
    Ok(McqItem {
        item_id: id.to_string(),
        dimension: dim,
        language: record.language,
        audio: AudioRef::file(&record.audio_path),
        source_utterance_id: record.utterance_id.clone(),
        stem,
        options,
        answer_index,
        semantic_conflict: wire.semantic_conflict,
        admission: admitted.evidence,
    })
}

// ---------------------------------------------------------------------------
// TPT references and controls

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TptRef {
    pub item_id: String,
    pub utterance_id: String,
    pub language: Language,
    pub audio: AudioRef,
    /// Tagged reference transcript.
    pub reference: String,
    /// Control items have no paralinguistic events.
    pub control: bool,
    pub admission: AdmissionEvidence,
}

impl TptRef {
    pub fn from_admitted(a: &Admitted) -> Self {
        let r = &a.entry.record;
        let stratum = Stratum { dimension: AttributeDimension::Tpt, language: r.language };
        TptRef {
            item_id: item_id(stratum, &r.utterance_id),
            utterance_id: r.utterance_id.clone(),
            language: r.language,
            audio: AudioRef::file(&r.audio_path),
            reference: r.transcript_tagged.clone(),
            control: r.paralinguistic_events.is_empty(),
            admission: a.evidence,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlSelection {
    /// The TPT set followed by the selected controls.
    pub refs: Vec<TptRef>,
    pub requested: usize,
    pub selected: usize,
}

/// Adds round(fraction × |tpt|) control items, drawn without replacement
/// from admitted records of the same language that have no events and are
/// not already in the set.
pub fn inject_controls(
    tpt: &[Admitted],
    pool: &[Admitted],
    language: Language,
    fraction: f64,
    seed: u64,
) -> ControlSelection {
    let mut refs: Vec<TptRef> = tpt.iter().map(TptRef::from_admitted).collect();
    let taken: std::collections::HashSet<&str> = tpt.iter().map(|a| a.entry.record.utterance_id.as_str()).collect();
    let mut eligible: Vec<&Admitted> = pool
        .iter()
        .filter(|a| {
            let r = &a.entry.record;
            r.language == language && r.paralinguistic_events.is_empty() && !taken.contains(r.utterance_id.as_str())
        })
        .collect();
    eligible.sort_by(|a, b| a.entry.record.utterance_id.cmp(&b.entry.record.utterance_id));
    eligible.dedup_by(|a, b| a.entry.record.utterance_id == b.entry.record.utterance_id);
    let requested = (fraction * tpt.len() as f64).round() as usize;
    let n = requested.min(eligible.len());
    if n < requested {
        tracing::warn!(%language, requested, available = eligible.len(), "not enough control candidates");
    }
    let mut rng = rng_for(seed, &format!("controls/{language}"));
    let mut picked = rand::seq::index::sample(&mut rng, eligible.len(), n).into_vec();
    picked.sort_unstable();
    refs.extend(picked.into_iter().map(|i| TptRef::from_admitted(eligible[i])));
    ControlSelection { refs, requested, selected: n }
}

// ---------------------------------------------------------------------------
// Package

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchPackage {
    pub items: BTreeMap<Stratum, Vec<McqItem>>,
    pub tpt: BTreeMap<Language, Vec<TptRef>>,
    /// Free-form build facts (configuration, shortfalls, dropped items).
    pub provenance: Vec<Value>,
}

impl BenchPackage {
    pub fn item_count(&self) -> usize {
        self.items.values().map(Vec::len).sum()
    }

    pub fn all_items(&self) -> impl Iterator<Item = &McqItem> {
        self.items.values().flatten()
    }

    pub fn all_tpt(&self) -> impl Iterator<Item = &TptRef> {
        self.tpt.values().flatten()
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("io error on {path}: {detail}")]
    Io { path: String, detail: String },
    #[error("{path}:{line}: {detail}")]
    Parse { path: String, line: usize, detail: String },
    #[error("item {0} violates the admission thresholds")]
    AdmissionViolated(String),
    #[error("item {item}: {error}")]
    InvalidItem { item: String, error: McqInvalid },
    #[error("{path} has {actual} lines but provenance records {recorded}")]
    CountMismatch { path: String, recorded: usize, actual: usize },
}

fn io_err(path: &Path, e: std::io::Error) -> BenchError {
    BenchError::Io { path: path.display().to_string(), detail: e.to_string() }
}

pub fn mcq_manifest_path(stratum: Stratum) -> String {
    format!("{}/{}/items.jsonl", stratum.dimension.abbrev().to_lowercase(), stratum.language.code().to_lowercase())
}

pub fn tpt_manifest_path(language: Language) -> String {
    format!("tpt/{}/refs.jsonl", language.code().to_lowercase())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExportSummary {
    /// Relative manifest path → line count.
    pub manifests: BTreeMap<String, usize>,
    pub controls: usize,
    pub warnings: Vec<String>,
}

fn write_lines<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<usize, BenchError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut text = String::new();
    let mut n = 0;
    for r in rows {
        text.push_str(&serde_json::to_string(&r).expect("serializes"));
        text.push('\n');
        n += 1;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))?;
    Ok(n)
}

/// Writes the package layout. Re-checks admission and item invariants;
/// empty strata get no manifest and a warning.
pub fn export_package(pkg: &BenchPackage, out_dir: impl AsRef<Path>, admission: &AdmissionConfig) -> Result<ExportSummary, BenchError> {
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    for item in pkg.all_items() {
        if !item.admission.passes(admission) {
            return Err(BenchError::AdmissionViolated(item.item_id.clone()));
        }
        item.validate(MIN_OPTIONS)
            .map_err(|error| BenchError::InvalidItem { item: item.item_id.clone(), error })?;
    }
    for r in pkg.all_tpt() {
        if !r.admission.passes(admission) {
            return Err(BenchError::AdmissionViolated(r.item_id.clone()));
        }
    }

    let mut summary = ExportSummary::default();
    for dimension in AttributeDimension::mcq() {
        for language in [Language::Zh, Language::En] {
            let stratum = Stratum { dimension, language };
            let rel = mcq_manifest_path(stratum);
            match pkg.items.get(&stratum) {
                Some(items) if !items.is_empty() => {
                    let n = write_lines(&out.join(&rel), items)?;
                    tracing::info!(manifest = %rel, items = n, "wrote manifest");
                    summary.manifests.insert(rel, n);
                }
                _ => {
                    let w = format!("stratum {stratum} is empty; {rel} omitted");
                    tracing::warn!("{w}");
                    summary.warnings.push(w);
                }
            }
        }
    }
    for language in [Language::Zh, Language::En] {
        let rel = tpt_manifest_path(language);
        match pkg.tpt.get(&language) {
            Some(refs) if !refs.is_empty() => {
                let n = write_lines(&out.join(&rel), refs)?;
                tracing::info!(manifest = %rel, items = n, "wrote manifest");
                summary.manifests.insert(rel, n);
            }
            _ => {
                let w = format!("TPT/{language} is empty; {rel} omitted");
                tracing::warn!("{w}");
                summary.warnings.push(w);
            }
        }
    }
    let controls: Vec<Value> = pkg
        .all_tpt()
        .filter(|r| r.control)
        .map(|r| json!({ "item_id": r.item_id, "utterance_id": r.utterance_id, "language": r.language }))
        .collect();
    summary.controls = write_lines(&out.join("controls.jsonl"), &controls)?;

    let counts = summary.manifests.iter().map(|(m, n)| json!({ "kind": "count", "manifest": m, "items": n }));
    write_lines(&out.join("provenance.jsonl"), pkg.provenance.iter().cloned().chain(counts))?;
    Ok(summary)
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, BenchError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| BenchError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                detail: e.to_string(),
            })
        })
        .collect()
}

/// Reads a package back, checking manifest lengths against the recorded
/// counts and the control registry against the TPT flags.
pub fn import_package(dir: impl AsRef<Path>) -> Result<BenchPackage, BenchError> {
    let dir = dir.as_ref();
    let mut pkg = BenchPackage::default();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for line in read_lines::<Value>(&dir.join("provenance.jsonl"))? {
        if line["kind"] == "count" {
            let m = line["manifest"].as_str().unwrap_or_default().to_string();
            counts.insert(m, line["items"].as_u64().unwrap_or(0) as usize);
        } else {
            pkg.provenance.push(line);
        }
    }
    let check = |rel: &str, actual: usize| match counts.get(rel) {
        Some(&recorded) if recorded != actual => {
            Err(BenchError::CountMismatch { path: rel.to_string(), recorded, actual })
        }
        _ => Ok(()),
    };
    for dimension in AttributeDimension::mcq() {
        for language in [Language::Zh, Language::En] {
            let stratum = Stratum { dimension, language };
            let rel = mcq_manifest_path(stratum);
            let path = dir.join(&rel);
            if path.exists() {
                let items: Vec<McqItem> = read_lines(&path)?;
                check(&rel, items.len())?;
                pkg.items.insert(stratum, items);
            }
        }
    }
    for language in [Language::Zh, Language::En] {
        let rel = tpt_manifest_path(language);
        let path = dir.join(&rel);
        if path.exists() {
            let refs: Vec<TptRef> = read_lines(&path)?;
            check(&rel, refs.len())?;
            pkg.tpt.insert(language, refs);
        }
    }
    let controls: Vec<Value> = read_lines(&dir.join("controls.jsonl"))?;
    let flagged = pkg.all_tpt().filter(|r| r.control).count();
    if flagged != controls.len() {
        return Err(BenchError::CountMismatch { path: "controls.jsonl".into(), recorded: flagged, actual: controls.len() });
    }
    Ok(pkg)
}

// ---------------------------------------------------------------------------
// End-to-end build

#[derive(Debug, Clone)]
pub struct BuildConfig {
    pub seed: u64,
    pub admission: AdmissionConfig,
    pub mcq: McqConfig,
    pub control_fraction: f64,
    pub concurrency: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            admission: AdmissionConfig::default(),
            mcq: McqConfig::default(),
            control_fraction: DEFAULT_CONTROL_FRACTION,
            concurrency: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BuildReport {
    pub candidates: usize,
    pub admitted: usize,
    pub shortfalls: Vec<Shortfall>,
    /// Items dropped after generation failed, with the reason.
    pub dropped: Vec<(String, String)>,
    pub controls_requested: usize,
    pub controls_selected: usize,
}

/// Admission → sampling → MCQ generation → controls.
pub fn build_package(
    entries: &[ManifestEntry],
    targets: &Targets,
    backend: &dyn Backend,
    cfg: &BuildConfig,
) -> (BenchPackage, BuildReport) {
    let admission = admit_candidates(entries, &cfg.admission);
    let sample = stratified_sample(&admission.admitted, targets, cfg.seed);
    let mut report = BuildReport {
        candidates: entries.len(),
        admitted: admission.admitted.len(),
        shortfalls: sample.shortfalls.clone(),
        ..Default::default()
    };

    let jobs: Vec<(Stratum, &Admitted)> = sample
        .strata
        .iter()
        .filter(|(s, _)| s.dimension.is_mcq())
        .flat_map(|(s, v)| v.iter().map(move |a| (*s, a)))
        .collect();
    let generated = par::map_bounded(cfg.concurrency.max(1), &jobs, |(s, a)| {
        generate_mcq(a, s.dimension, backend, &cfg.mcq, cfg.seed)
    });

    let mut pkg = BenchPackage::default();
    for ((stratum, a), res) in jobs.iter().zip(generated) {
        match res {
            Ok(item) => pkg.items.entry(*stratum).or_default().push(item),
            Err(e) => {
                let id = item_id(*stratum, &a.entry.record.utterance_id);
                tracing::warn!(item = %id, error = %e, "dropped MCQ item");
                report.dropped.push((id, e.to_string()));
            }
        }
    }
    for language in [Language::Zh, Language::En] {
        let stratum = Stratum { dimension: AttributeDimension::Tpt, language };
        let Some(tpt) = sample.strata.get(&stratum) else { continue };
        let sel = inject_controls(tpt, &admission.admitted, language, cfg.control_fraction, cfg.seed);
        report.controls_requested += sel.requested;
        report.controls_selected += sel.selected;
        if !sel.refs.is_empty() {
            pkg.tpt.insert(language, sel.refs);
        }
    }

    pkg.provenance.push(json!({
        "kind": "config",
        "seed": cfg.seed,
        "admission_max_err": cfg.admission.max_err,
        "admission_min_duration_s": cfg.admission.min_duration_s,
        "n_options": cfg.mcq.n_options,
        "generation_attempts": cfg.mcq.attempts,
        "generation_template": cfg.mcq.template.id,
        "control_fraction": cfg.control_fraction,
        "targets": targets.to_json(),
    }));
    pkg.provenance.push(json!({
        "kind": "admission",
        "candidates": report.candidates,
        "admitted": report.admitted,
    }));
    for s in &report.shortfalls {
        pkg.provenance.push(json!({ "kind": "shortfall", "stratum": s.stratum.to_string(), "target": s.target, "available": s.available }));
    }
    for (id, why) in &report.dropped {
        pkg.provenance.push(json!({ "kind": "dropped", "item_id": id, "reason": why }));
    }
    pkg.provenance.push(json!({
        "kind": "controls",
        "requested": report.controls_requested,
        "selected": report.controls_selected,
    }));
    (pkg, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScriptedBackend;
    use crate::mock::MockBackend;
    use crate::schema::{fixtures::record, QualityMark};

    fn entry(id: &str, err: f64, duration: f64) -> ManifestEntry {
        let mut r = record(id, Language::Zh, "你好");
        r.duration_s = duration;
        let mut e = ManifestEntry::new(r);
        e.set_quality("wer", QualityMark::Score(err));
        e
    }

    #[test]
    fn admission_boundaries() {
        let cfg = AdmissionConfig::default();
        assert!(admit(&entry("a", 0.099, 3.0), &cfg).is_ok());
        assert_eq!(admit(&entry("b", 0.10, 5.0), &cfg), Err(AdmissionRejection::ErrTooHigh(0.10)));
        assert_eq!(admit(&entry("c", 0.0, 2.9), &cfg), Err(AdmissionRejection::TooShort(2.9)));
        let bare = ManifestEntry::new(record("d", Language::Zh, "你好"));
        assert_eq!(admit(&bare, &cfg), Err(AdmissionRejection::MissingErr));
    }

    fn admitted(n: usize, lang: Language) -> Vec<Admitted> {
        (0..n)
            .map(|i| {
                let tagged = if i % 2 == 0 { "<Laughter> hi there" } else { "hi there" };
                Admitted {
                    entry: ManifestEntry::new(record(&format!("u{i:05}"), lang, tagged)),
                    evidence: AdmissionEvidence { err: 0.0, duration_s: 4.0 },
                }
            })
            .collect()
    }

    #[test]
    fn sampling_counts_shortfall_and_determinism() {
        let pool = admitted(2000, Language::Zh);
        let gen = Stratum { dimension: AttributeDimension::Gen, language: Language::Zh };
        let targets = Targets([(gen, 932)].into_iter().collect());
        let a = stratified_sample(&pool, &targets, 7);
        assert_eq!(a.strata[&gen].len(), 932);
        assert!(a.shortfalls.is_empty());
        assert_eq!(a, stratified_sample(&pool, &targets, 7));
        assert_ne!(a, stratified_sample(&pool, &targets, 8));
        let mut reversed = pool.clone();
        reversed.reverse();
        assert_eq!(a, stratified_sample(&reversed, &targets, 7));

        let small = admitted(100, Language::Zh);
        let targets = Targets([(gen, 500)].into_iter().collect());
        let s = stratified_sample(&small, &targets, 7);
        assert_eq!(s.strata[&gen].len(), 100);
        assert_eq!(s.shortfalls, vec![Shortfall { stratum: gen, target: 500, available: 100 }]);
    }

    #[test]
    fn published_targets_cover_all_strata() {
        let t = Targets::published();
        assert_eq!(t.0.len(), 28);
        assert_eq!(t.0[&Stratum { dimension: AttributeDimension::Gen, language: Language::Zh }], 932);
        assert_eq!(Targets::from_json(&t.to_json().to_string()).unwrap(), t);
    }

    fn gen_item_backend(options: Value) -> ScriptedBackend {
        ScriptedBackend::new(move |_, _| {
            Ok(json!({ "stem": "What is the gender of the speaker in this speech?", "options": options.clone() }))
        })
    }

    fn one() -> Admitted {
        Admitted { entry: ManifestEntry::new(record("u1", Language::En, "hi")), evidence: AdmissionEvidence { err: 0.0, duration_s: 4.0 } }
    }

    fn cfg() -> McqConfig {
        McqConfig { retry: RetryPolicy::immediate(1), ..Default::default() }
    }

    #[test]
    fn mcq_validation() {
        let ok = json!([
            {"text": "Male", "klass": "GroundTruth", "correct": true},
            {"text": "Female", "klass": "FineGrainedAcoustic", "correct": false},
            {"text": "A child's voice", "klass": "FineGrainedAcoustic", "correct": false},
            {"text": "Cannot be determined", "klass": "Other", "correct": false},
            {"text": "Male, speaking in falsetto", "klass": "SemanticTrap", "correct": false}
        ]);
        let item = generate_mcq(&one(), AttributeDimension::Gen, &gen_item_backend(ok), &cfg(), 1).unwrap();
        assert_eq!(item.key_text(), "Male");
        item.validate(MIN_OPTIONS).unwrap();

        let dup = json!([
            {"text": "Male", "klass": "GroundTruth", "correct": true},
            {"text": "Female", "klass": "FineGrainedAcoustic", "correct": false},
            {"text": "female", "klass": "FineGrainedAcoustic", "correct": false},
            {"text": "Other", "klass": "Other", "correct": false}
        ]);
        let b = gen_item_backend(dup);
        match generate_mcq(&one(), AttributeDimension::Gen, &b, &cfg(), 1) {
            Err(GenerationError::GenerationInvalid { attempts: 3, last: McqInvalid::DuplicateOption(_) }) => {}
            other => panic!("{other:?}"),
        }
        assert_eq!(b.call_count(), 3);

        let two_keys = json!([
            {"text": "Male", "klass": "GroundTruth", "correct": true},
            {"text": "Female", "klass": "GroundTruth", "correct": true},
            {"text": "Child", "klass": "FineGrainedAcoustic", "correct": false},
            {"text": "Other", "klass": "Other", "correct": false}
        ]);
        assert!(matches!(
            generate_mcq(&one(), AttributeDimension::Gen, &gen_item_backend(two_keys), &cfg(), 1),
            Err(GenerationError::GenerationInvalid { last: McqInvalid::MultipleKeys, .. })
        ));
        assert!(matches!(
            generate_mcq(&one(), AttributeDimension::Tpt, &MockBackend::new(), &cfg(), 1),
            Err(GenerationError::Precondition(_))
        ));
    }

    #[test]
    fn semantic_conflict_needs_trap() {
        let b = ScriptedBackend::new(|_, _| {
            Ok(json!({ "semantic_conflict": true, "options": [
                {"text": "Male", "klass": "GroundTruth", "correct": true},
                {"text": "Female", "klass": "FineGrainedAcoustic", "correct": false},
                {"text": "Child", "klass": "FineGrainedAcoustic", "correct": false},
                {"text": "Other", "klass": "Other", "correct": false}
            ]}))
        });
        assert!(matches!(
            generate_mcq(&one(), AttributeDimension::Gen, &b, &cfg(), 1),
            Err(GenerationError::GenerationInvalid { last: McqInvalid::MissingSemanticTrap, .. })
        ));
    }

    #[test]
    fn controls_fraction_and_eligibility() {
        let tagged: Vec<Admitted> = admitted(200, Language::En).into_iter().filter(|a| !a.entry.record.paralinguistic_events.is_empty()).collect();
        assert_eq!(tagged.len(), 100);
        let pool = admitted(400, Language::En);
        let sel = inject_controls(&tagged, &pool, Language::En, 0.2, 3);
        assert_eq!(sel.selected, 20);
        assert_eq!(sel.refs.len(), 120);
        for r in &sel.refs {
            let src = pool.iter().find(|a| a.entry.record.utterance_id == r.utterance_id).unwrap();
            assert_eq!(r.control, src.entry.record.paralinguistic_events.is_empty());
        }
        assert_eq!(sel, inject_controls(&tagged, &pool, Language::En, 0.2, 3));
    }
}
