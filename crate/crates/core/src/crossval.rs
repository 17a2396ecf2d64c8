//! Multi-expert cross-validation of annotated records.
//!
//! Five filters compare a record against independent expert predictions:
//! re-transcription error, emotion polarity, pitch/rate intensity,
//! demographics, and paralinguistic-event presence. A record survives iff
//! every enabled filter passes. All enabled filters are always evaluated, so
//! the survivor set and the attribution statistics do not depend on order.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::backend::{call_with_retry, endpoints, AudioRef, Backend, RetryPolicy};
use crate::metrics;
use crate::par;
use crate::schema::{AnnotationRecord, ManifestEntry, QualityMark, TagVocabulary};

pub const DEFAULT_MAX_ERR: f64 = 0.30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Wer,
    Emotion,
    Intensity,
    Demographics,
    Para,
}

impl FilterKind {
    pub const ALL: [FilterKind; 5] =
        [FilterKind::Wer, FilterKind::Emotion, FilterKind::Intensity, FilterKind::Demographics, FilterKind::Para];

    pub fn name(self) -> &'static str {
        match self {
            FilterKind::Wer => "wer",
            FilterKind::Emotion => "emotion",
            FilterKind::Intensity => "intensity",
            FilterKind::Demographics => "demographics",
            FilterKind::Para => "para",
        }
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FilterKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown filter `{s}` (expected wer, emotion, intensity, demographics, para)"))
    }
}

/// Parses a comma-separated filter list such as `wer,emotion`.
pub fn parse_filter_list(s: &str) -> Result<Vec<FilterKind>, String> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub filter: FilterKind,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub detail: String,
}

impl FilterVerdict {
    fn new(filter: FilterKind, pass: bool, score: Option<f64>, detail: impl Into<String>) -> Self {
        Self { filter, pass, score, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("record transcript is empty")]
    EmptyReference,
    #[error("record transcript does not tokenize: {0}")]
    BadReference(String),
}

// ---------------------------------------------------------------------------
// Text normalization shared by the lexicons

/// Lowercased alphanumeric words; everything else separates.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// First position at which `phrase` occurs as a contiguous word run.
fn find_phrase(words: &[String], phrase: &[String]) -> Option<usize> {
    if phrase.is_empty() || phrase.len() > words.len() {
        return None;
    }
    words.windows(phrase.len()).position(|w| w == phrase)
}

// ---------------------------------------------------------------------------
// Emotion polarity

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Positive,
    Negative,
    Neutral,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarityRule {
    pub polarity: Polarity,
    pub keywords: Vec<String>,
}

/// Ordered keyword rules; the first rule with a keyword present wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarityMap {
    pub rules: Vec<PolarityRule>,
}

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("cannot read lexicon {path}: {detail}")]
    Io { path: String, detail: String },
    #[error("malformed lexicon: {0}")]
    Malformed(String),
    #[error("invalid lexicon: {0}")]
    Invalid(String),
}

fn read_lexicon<T: for<'de> Deserialize<'de>>(path: &std::path::Path) -> Result<T, LexiconError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| LexiconError::Io { path: path.display().to_string(), detail: e.to_string() })?;
    serde_json::from_str(&text).map_err(|e| LexiconError::Malformed(e.to_string()))
}

impl Default for PolarityMap {
    fn default() -> Self {
        Self::from_json(include_str!("../assets/lexicons/polarity.v1.json")).expect("built-in lexicon is valid")
    }
}

impl PolarityMap {
    pub fn from_json(text: &str) -> Result<Self, LexiconError> {
        let map: Self = serde_json::from_str(text).map_err(|e| LexiconError::Malformed(e.to_string()))?;
        map.check()?;
        Ok(map)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, LexiconError> {
        let map: Self = read_lexicon(path.as_ref())?;
        map.check()?;
        Ok(map)
    }

    fn check(&self) -> Result<(), LexiconError> {
        for (i, r) in self.rules.iter().enumerate() {
            if r.polarity == Polarity::Unknown {
                return Err(LexiconError::Invalid(format!("rule {i} maps to Unknown")));
            }
            if r.keywords.is_empty() || r.keywords.iter().any(|k| normalize_words(k).is_empty()) {
                return Err(LexiconError::Invalid(format!("rule {i} has an empty keyword set or keyword")));
            }
        }
        Ok(())
    }

    pub fn polarity(&self, description: &str) -> Polarity {
        let words = normalize_words(description);
        for rule in &self.rules {
            if rule.keywords.iter().any(|k| find_phrase(&words, &normalize_words(k)).is_some()) {
                return rule.polarity;
            }
        }
        Polarity::Unknown
    }
}

// ---------------------------------------------------------------------------
// Intensity

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    Low,
    Medium,
    High,
    Unknown,
}

impl Level {
    /// Parses an expert's level label (`low`, `Medium`, ...).
    pub fn parse_label(s: &str) -> Level {
        match s.trim().to_ascii_lowercase().as_str() {
            "low" => Level::Low,
            "medium" | "mid" | "moderate" => Level::Medium,
            "high" => Level::High,
            _ => Level::Unknown,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRule {
    pub level: Level,
    pub keywords: Vec<String>,
}

/// Quantizes pitch and speaking-rate descriptions. The keyword occurring
/// earliest in the description decides (longer phrase on a tie), since
/// descriptions lead with the level and qualify it afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityScale {
    pub pitch: Vec<LevelRule>,
    pub rate: Vec<LevelRule>,
}

impl Default for IntensityScale {
    fn default() -> Self {
        Self::from_json(include_str!("../assets/lexicons/intensity.v1.json")).expect("built-in lexicon is valid")
    }
}

fn quantize(rules: &[LevelRule], description: &str) -> Level {
    let words = normalize_words(description);
    let mut best: Option<(usize, std::cmp::Reverse<usize>, Level)> = None;
    for rule in rules {
        for k in &rule.keywords {
            let phrase = normalize_words(k);
            if let Some(pos) = find_phrase(&words, &phrase) {
                let cand = (pos, std::cmp::Reverse(phrase.len()), rule.level);
                if best.is_none_or(|b| (cand.0, cand.1) < (b.0, b.1)) {
                    best = Some(cand);
                }
            }
        }
    }
    best.map_or(Level::Unknown, |b| b.2)
}

impl IntensityScale {
    pub fn from_json(text: &str) -> Result<Self, LexiconError> {
        let s: Self = serde_json::from_str(text).map_err(|e| LexiconError::Malformed(e.to_string()))?;
        s.check()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, LexiconError> {
        let s: Self = read_lexicon(path.as_ref())?;
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<(), LexiconError> {
        for rules in [&self.pitch, &self.rate] {
            for r in rules {
                if r.level == Level::Unknown || r.keywords.is_empty() {
                    return Err(LexiconError::Invalid("every level rule needs a level and keywords".into()));
                }
            }
        }
        Ok(())
    }

    pub fn pitch_level(&self, description: &str) -> Level {
        quantize(&self.pitch, description)
    }

    pub fn rate_level(&self, description: &str) -> Level {
        quantize(&self.rate, description)
    }
}

// ---------------------------------------------------------------------------
// Demographics

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgeBucket {
    Child,
    Teenager,
    YoungAdult,
    MiddleAged,
    Senior,
}

impl AgeBucket {
    pub fn from_years(years: u32) -> Self {
        match years {
            0..=12 => AgeBucket::Child,
            13..=18 => AgeBucket::Teenager,
            19..=35 => AgeBucket::YoungAdult,
            36..=59 => AgeBucket::MiddleAged,
            _ => AgeBucket::Senior,
        }
    }

    /// Bucket of an age description: a bucket name (`Young Adult (19-35
    /// years old)`), else the first number (`27`, `in their 40s`).
    pub fn parse(text: &str) -> Option<Self> {
        let words = normalize_words(text);
        let has = |p: &str| find_phrase(&words, &normalize_words(p)).is_some();
        let named = [
            ("young adult", AgeBucket::YoungAdult),
            ("middle aged", AgeBucket::MiddleAged),
            ("teenager", AgeBucket::Teenager),
            ("teen", AgeBucket::Teenager),
            ("adolescent", AgeBucket::Teenager),
            ("child", AgeBucket::Child),
            ("kid", AgeBucket::Child),
            ("senior", AgeBucket::Senior),
            ("elderly", AgeBucket::Senior),
        ];
        if let Some((_, b)) = named.iter().find(|(p, _)| has(p)) {
            return Some(*b);
        }
        let digits: String = text
            .chars()
            .skip_while(|c| !c.is_ascii_digit())
            .take_while(|c| c.is_ascii_digit())
            .collect();
        digits.parse().ok().map(AgeBucket::from_years)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub fn parse(text: &str) -> Option<Self> {
        let words = normalize_words(text);
        let male = ["male", "man", "men", "boy", "masculine"];
        let female = ["female", "woman", "women", "girl", "feminine"];
        let m = words.iter().any(|w| male.contains(&w.as_str()));
        let f = words.iter().any(|w| female.contains(&w.as_str()));
        match (m, f) {
            (true, false) => Some(Gender::Male),
            (false, true) => Some(Gender::Female),
            _ => None,
        }
    }
}

const ACCENT_STOPWORDS: [&str; 13] =
    ["the", "speaker", "speaks", "has", "have", "with", "a", "an", "accent", "accented", "is", "in", "of"];

/// Content words of an accent description.
pub fn accent_core(text: &str) -> Vec<String> {
    normalize_words(text).into_iter().filter(|w| !ACCENT_STOPWORDS.contains(&w.as_str())).collect()
}

/// Two accent descriptions agree when the content words of one occur as a
/// contiguous run in the other (`North American` vs `The speaker has a North
/// American accent.`).
pub fn accents_agree(a: &str, b: &str) -> bool {
    let (a, b) = (accent_core(a), accent_core(b));
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    find_phrase(&long, &short).is_some()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemographicsPrediction {
    pub age: String,
    pub gender: String,
    pub accent: String,
}

// ---------------------------------------------------------------------------
// The five filters

pub fn filter_transcription_error(
    record: &AnnotationRecord,
    expert_transcript: &str,
    max_err: f64,
    vocab: &TagVocabulary,
) -> Result<FilterVerdict, FilterError> {
    let reference = metrics::tokenize(&record.transcript, record.language, vocab)
        .map_err(|e| FilterError::BadReference(e.to_string()))?;
    if metrics::text_tokens(&reference).is_empty() {
        return Err(FilterError::EmptyReference);
    }
    let err = metrics::compute_err(&record.transcript, expert_transcript, record.language, vocab)
        .map_err(|e| FilterError::BadReference(e.to_string()))?;
    let unit = match record.language {
        crate::Language::En => "WER",
        crate::Language::Zh => "CER",
    };
    Ok(FilterVerdict::new(FilterKind::Wer, err <= max_err, Some(err), format!("{unit} {err:.4} (max {max_err})")))
}

pub fn filter_emotion_polarity(record: &AnnotationRecord, expert_label: &str, map: &PolarityMap) -> FilterVerdict {
    let ours = map.polarity(&record.emotion);
    let theirs = map.polarity(expert_label);
    let pass = ours == theirs && ours != Polarity::Unknown;
    FilterVerdict::new(FilterKind::Emotion, pass, None, format!("record {ours:?}, expert {theirs:?}"))
}

pub fn filter_intensity(
    record: &AnnotationRecord,
    expert_pitch: Level,
    expert_rate: Level,
    scale: &IntensityScale,
    fail_open: bool,
) -> FilterVerdict {
    let pitch = scale.pitch_level(&record.pitch);
    let rate = scale.rate_level(&record.speaking_rate);
    let agree = |ours: Level, theirs: Level| {
        if ours == Level::Unknown || theirs == Level::Unknown {
            fail_open
        } else {
            ours == theirs
        }
    };
    let pass = agree(pitch, expert_pitch) && agree(rate, expert_rate);
    let unknown = [pitch, rate, expert_pitch, expert_rate].contains(&Level::Unknown);
    let detail = format!(
        "pitch {pitch:?}/{expert_pitch:?}, rate {rate:?}/{expert_rate:?}{}",
        if unknown { " (Unknown)" } else { "" }
    );
    FilterVerdict::new(FilterKind::Intensity, pass, None, detail)
}

pub fn filter_demographics(record: &AnnotationRecord, expert: &DemographicsPrediction) -> FilterVerdict {
    let age = match (AgeBucket::parse(&record.age), AgeBucket::parse(&expert.age)) {
        (Some(a), Some(b)) => a == b,
        _ => false,
    };
    let gender = match (Gender::parse(&record.gender), Gender::parse(&expert.gender)) {
        (Some(a), Some(b)) => a == b,
        _ => false,
    };
    let accent = accents_agree(&record.accent, &expert.accent);
    let mut disagree = Vec::new();
    for (ok, name) in [(age, "age"), (gender, "gender"), (accent, "accent")] {
        if !ok {
            disagree.push(name);
        }
    }
    let detail = if disagree.is_empty() { "all agree".to_string() } else { format!("disagree on {}", disagree.join(", ")) };
    FilterVerdict::new(FilterKind::Demographics, disagree.is_empty(), None, detail)
}

pub fn filter_paralinguistic_presence(record: &AnnotationRecord, expert_presence: bool) -> FilterVerdict {
    let ours = !record.paralinguistic_events.is_empty();
    FilterVerdict::new(
        FilterKind::Para,
        ours == expert_presence,
        None,
        format!("record {}, expert {}", if ours { "present" } else { "absent" }, if expert_presence { "present" } else { "absent" }),
    )
}

// ---------------------------------------------------------------------------
// Expert clients

/// Which backend answers for each filter.
#[derive(Clone)]
pub struct ExpertMap {
    default: Arc<dyn Backend>,
    overrides: HashMap<FilterKind, Arc<dyn Backend>>,
}

impl ExpertMap {
    pub fn single(backend: Arc<dyn Backend>) -> Self {
        Self { default: backend, overrides: HashMap::new() }
    }

    pub fn with(mut self, filter: FilterKind, backend: Arc<dyn Backend>) -> Self {
        self.overrides.insert(filter, backend);
        self
    }

    pub fn for_filter(&self, filter: FilterKind) -> &dyn Backend {
        self.overrides.get(&filter).unwrap_or(&self.default).as_ref()
    }
}

fn expert_request(record: &AnnotationRecord, extra: Value) -> Value {
    let mut v = json!({
        "utterance_id": record.utterance_id,
        "language": record.language,
        "audio": AudioRef::file(&record.audio_path),
    });
    if let (Value::Object(m), Value::Object(e)) = (&mut v, extra) {
        m.extend(e);
    }
    v
}

fn field<'a>(v: &'a Value, key: &str) -> Result<&'a Value, String> {
    v.get(key).ok_or_else(|| format!("expert response lacks `{key}`"))
}

fn text_field(v: &Value, key: &str) -> Result<String, String> {
    field(v, key)?.as_str().map(str::to_string).ok_or_else(|| format!("`{key}` is not a string"))
}

#[derive(Debug, Clone)]
pub struct CascadeConfig {
    /// Enabled filters. Order has no effect on the outcome.
    pub filters: Vec<FilterKind>,
    pub max_err: f64,
    pub polarity: PolarityMap,
    pub intensity: IntensityScale,
    pub intensity_fail_open: bool,
    pub vocab: TagVocabulary,
    pub retry: RetryPolicy,
    pub concurrency: usize,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            filters: FilterKind::ALL.to_vec(),
            max_err: DEFAULT_MAX_ERR,
            polarity: PolarityMap::default(),
            intensity: IntensityScale::default(),
            intensity_fail_open: false,
            vocab: TagVocabulary::default(),
            retry: RetryPolicy::default(),
            concurrency: 8,
        }
    }
}

/// Queries the filter's expert and evaluates it. Expert or reference errors
/// fail the filter (closed), with the reason in `detail`.
pub fn evaluate_filter(
    record: &AnnotationRecord,
    filter: FilterKind,
    experts: &ExpertMap,
    cfg: &CascadeConfig,
) -> FilterVerdict {
    let backend = experts.for_filter(filter);
    let ask = |endpoint: &str, extra: Value| {
        call_with_retry(backend, endpoint, &expert_request(record, extra), &cfg.retry)
            .map(|ex| ex.response)
            .map_err(|e| format!("expert error: {e}"))
    };
    let classify = |kind: &str| ask(endpoints::CLASSIFY, json!({ "kind": kind }));
    let result: Result<FilterVerdict, String> = (|| match filter {
        FilterKind::Wer => {
            let text = text_field(&ask(endpoints::TRANSCRIBE, json!({}))?, "text")?;
            filter_transcription_error(record, &text, cfg.max_err, &cfg.vocab).map_err(|e| e.to_string())
        }
        FilterKind::Emotion => {
            let label = text_field(&classify("emotion")?, "label")?;
            Ok(filter_emotion_polarity(record, &label, &cfg.polarity))
        }
        FilterKind::Intensity => {
            let r = classify("intensity")?;
            let pitch = Level::parse_label(&text_field(&r, "pitch")?);
            let rate = Level::parse_label(&text_field(&r, "rate")?);
            Ok(filter_intensity(record, pitch, rate, &cfg.intensity, cfg.intensity_fail_open))
        }
        FilterKind::Demographics => {
            let r = classify("demographics")?;
            let age = match field(&r, "age")? {
                Value::Number(n) => n.to_string(),
                v => v.as_str().ok_or("`age` is not a string or number")?.to_string(),
            };
            let pred = DemographicsPrediction { age, gender: text_field(&r, "gender")?, accent: text_field(&r, "accent")? };
            Ok(filter_demographics(record, &pred))
        }
        FilterKind::Para => {
            let present = field(&classify("paralinguistic")?, "present")?.as_bool().ok_or("`present` is not a boolean")?;
            Ok(filter_paralinguistic_presence(record, present))
        }
    })();
    result.unwrap_or_else(|detail| FilterVerdict::new(filter, false, None, detail))
}

// ---------------------------------------------------------------------------
// Cascade

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub evaluated: usize,
    pub passed: usize,
    pub rejected: usize,
}

/// Per-filter counts. A record failing several filters counts against each.
/// Merging is associative and commutative.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CascadeStats {
    pub input: usize,
    pub survivors: usize,
    pub per_filter: BTreeMap<FilterKind, FilterStats>,
}

impl CascadeStats {
    pub fn merge(mut self, other: &CascadeStats) -> CascadeStats {
        self.input += other.input;
        self.survivors += other.survivors;
        for (k, s) in &other.per_filter {
            let e = self.per_filter.entry(*k).or_default();
            e.evaluated += s.evaluated;
            e.passed += s.passed;
            e.rejected += s.rejected;
        }
        self
    }

    fn of_record(verdicts: &[FilterVerdict]) -> CascadeStats {
        let mut s = CascadeStats { input: 1, survivors: verdicts.iter().all(|v| v.pass) as usize, ..Default::default() };
        for v in verdicts {
            let e = s.per_filter.entry(v.filter).or_default();
            e.evaluated += 1;
            if v.pass {
                e.passed += 1;
            } else {
                e.rejected += 1;
            }
        }
        s
    }

    pub fn rejected_by(&self, filter: FilterKind) -> usize {
        self.per_filter.get(&filter).map_or(0, |s| s.rejected)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub utterance_id: String,
    pub failed: Vec<FilterVerdict>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeOutcome {
    /// Surviving entries in input order, with one quality mark per filter.
    pub survivors: Vec<ManifestEntry>,
    pub rejections: Vec<Rejection>,
    pub stats: CascadeStats,
}

/// Runs every enabled filter on every record.
pub fn run_cascade(entries: &[ManifestEntry], experts: &ExpertMap, cfg: &CascadeConfig) -> CascadeOutcome {
    let mut filters = cfg.filters.clone();
    filters.sort();
    filters.dedup();
    let verdicts: Vec<Vec<FilterVerdict>> = par::map_bounded(cfg.concurrency.max(1), entries, |e| {
        filters.iter().map(|f| evaluate_filter(&e.record, *f, experts, cfg)).collect()
    });

    let mut out = CascadeOutcome { survivors: Vec::new(), rejections: Vec::new(), stats: CascadeStats::default() };
    for (entry, vs) in entries.iter().zip(verdicts) {
        out.stats = std::mem::take(&mut out.stats).merge(&CascadeStats::of_record(&vs));
        if vs.iter().all(|v| v.pass) {
            let mut e = entry.clone();
            for v in &vs {
                let mark = match v.score {
                    Some(s) => QualityMark::Score(s),
                    None => QualityMark::Flag(true),
                };
                e.set_quality(v.filter.name(), mark);
            }
            out.survivors.push(e);
        } else {
            out.rejections.push(Rejection {
                utterance_id: entry.record.utterance_id.clone(),
                failed: vs.into_iter().filter(|v| !v.pass).collect(),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::fixtures::record;
    use crate::Language;

    fn vocab() -> TagVocabulary {
        TagVocabulary::default()
    }

    #[test]
    fn transcription_threshold_is_inclusive() {
        let mut r = record("u", Language::En, "one two three four five six seven eight nine ten");
        let v = filter_transcription_error(&r, &r.transcript.clone(), 0.3, &vocab()).unwrap();
        assert!(v.pass);
        assert_eq!(v.score, Some(0.0));

        let four_wrong = "x y z w five six seven eight nine ten";
        let v = filter_transcription_error(&r, four_wrong, 0.3, &vocab()).unwrap();
        assert!(!v.pass);
        assert!((v.score.unwrap() - 0.4).abs() < 1e-12);

        let three_wrong = "x y z four five six seven eight nine ten";
        let v = filter_transcription_error(&r, three_wrong, 0.3, &vocab()).unwrap();
        assert!(v.pass, "exactly 0.30 passes");

        r.transcript = String::new();
        r.transcript_tagged = String::new();
        assert_eq!(filter_transcription_error(&r, "a", 0.3, &vocab()), Err(FilterError::EmptyReference));
    }

    #[test]
    fn emotion_polarity() {
        let map = PolarityMap::default();
        let mut r = record("u", Language::En, "hi");
        r.emotion = "Defensive yet deeply sorrowful".into();
        assert!(filter_emotion_polarity(&r, "angry", &map).pass);
        r.emotion = "joyful".into();
        assert!(!filter_emotion_polarity(&r, "sad", &map).pass);
        r.emotion = "calm and neutral".into();
        assert!(filter_emotion_polarity(&r, "neutral", &map).pass);
        r.emotion = "zorgish".into();
        let v = filter_emotion_polarity(&r, "zorgish", &map);
        assert!(!v.pass, "unknown fails closed");
        assert_eq!(map.polarity("not happy at all"), Polarity::Negative);
    }

    #[test]
    fn polarity_map_rejects_empty_rules() {
        assert!(PolarityMap::from_json(r#"{"rules":[{"polarity":"Positive","keywords":[]}]}"#).is_err());
    }

    #[test]
    fn intensity_levels() {
        let s = IntensityScale::default();
        let r = record("u", Language::En, "hi");
        assert_eq!(s.pitch_level(&r.pitch), Level::Low);
        assert_eq!(s.rate_level(&r.speaking_rate), Level::Medium);
        assert_eq!(s.pitch_level("High-pitched, but lower towards the end"), Level::High);
        assert!(filter_intensity(&r, Level::Low, Level::Medium, &s, false).pass);
        assert!(!filter_intensity(&r, Level::Low, Level::High, &s, false).pass);

        let mut odd = r.clone();
        odd.pitch = "Indescribable".into();
        let v = filter_intensity(&odd, Level::Low, Level::Medium, &s, false);
        assert!(!v.pass);
        assert!(v.detail.contains("Unknown"));
        assert!(filter_intensity(&odd, Level::Low, Level::Medium, &s, true).pass);
    }

    #[test]
    fn demographics() {
        let r = record("u", Language::En, "hi");
        let agree = DemographicsPrediction { age: "27".into(), gender: "male".into(), accent: "North American".into() };
        assert!(filter_demographics(&r, &agree).pass);
        let wrong_gender = DemographicsPrediction { gender: "Female".into(), ..agree.clone() };
        let v = filter_demographics(&r, &wrong_gender);
        assert!(!v.pass);
        assert_eq!(v.detail, "disagree on gender");
        assert!(!filter_demographics(&r, &DemographicsPrediction { accent: "English".into(), ..agree.clone() }).pass);
        assert!(!filter_demographics(&r, &DemographicsPrediction { age: "64".into(), ..agree }).pass);
        assert_eq!(AgeBucket::parse("Young Adult (19-35 years old)"), Some(AgeBucket::YoungAdult));
        assert_eq!(AgeBucket::parse("in their 40s"), Some(AgeBucket::MiddleAged));
        assert_eq!(Gender::parse("female"), Some(Gender::Female));
    }

    #[test]
    fn para_presence() {
        let tagged = record("u", Language::En, "<Laughter> hi");
        let plain = record("v", Language::En, "hi");
        assert!(filter_paralinguistic_presence(&tagged, true).pass);
        assert!(!filter_paralinguistic_presence(&tagged, false).pass);
        assert!(filter_paralinguistic_presence(&plain, false).pass);
    }

    #[test]
    fn stats_merge_is_associative() {
        let v = |f, p| FilterVerdict::new(f, p, None, "");
        let a = CascadeStats::of_record(&[v(FilterKind::Wer, true), v(FilterKind::Para, false)]);
        let b = CascadeStats::of_record(&[v(FilterKind::Wer, false)]);
        let c = CascadeStats::of_record(&[v(FilterKind::Emotion, true)]);
        assert_eq!(a.clone().merge(&b).merge(&c), a.merge(&b.merge(&c)));
    }

    #[test]
    fn filter_list_parsing() {
        assert_eq!(parse_filter_list("wer, para").unwrap(), vec![FilterKind::Wer, FilterKind::Para]);
        assert!(parse_filter_list("wer,bogus").is_err());
    }
}
