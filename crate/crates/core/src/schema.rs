//! The annotation schema: 14 attribute dimensions in a 5-tier hierarchy,
//! the per-utterance record that carries them, and its validation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::metrics::{self, TokenizeError, UniformToken};

pub const SCHEMA_VERSION: &str = "1.0";

const SUPPORTED_SCHEMA_VERSIONS: &[&str] = &[SCHEMA_VERSION];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Language {
    #[serde(rename = "ZH", alias = "zh")]
    Zh,
    #[serde(rename = "EN", alias = "en")]
    En,
}

impl Language {
    pub const ALL: [Language; 2] = [Language::Zh, Language::En];

    /// Lowercase code used in file layouts and CLI flags.
    pub fn code(self) -> &'static str {
        match self {
            Language::Zh => "zh",
            Language::En => "en",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Language::Zh => "ZH",
            Language::En => "EN",
        })
    }
}

impl FromStr for Language {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "zh" => Ok(Language::Zh),
            "en" => Ok(Language::En),
            other => Err(format!("unknown language `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tier {
    SpeakerDemographics,
    AcousticProsodic,
    AffectiveSemantic,
    AcousticScene,
    LinguisticParalinguistic,
}

impl Tier {
    pub const ALL: [Tier; 5] = [
        Tier::SpeakerDemographics,
        Tier::AcousticProsodic,
        Tier::AffectiveSemantic,
        Tier::AcousticScene,
        Tier::LinguisticParalinguistic,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AttributeDimension {
    Gen,
    Age,
    Acc,
    Pit,
    Sr,
    Rhy,
    Vt,
    Emo,
    Ton,
    Ci,
    Bs,
    Ae,
    Pe,
    Tpt,
}

impl AttributeDimension {
    pub const ALL: [AttributeDimension; 14] = [
        AttributeDimension::Gen,
        AttributeDimension::Age,
        AttributeDimension::Acc,
        AttributeDimension::Pit,
        AttributeDimension::Sr,
        AttributeDimension::Rhy,
        AttributeDimension::Vt,
        AttributeDimension::Emo,
        AttributeDimension::Ton,
        AttributeDimension::Ci,
        AttributeDimension::Bs,
        AttributeDimension::Ae,
        AttributeDimension::Pe,
        AttributeDimension::Tpt,
    ];

    /// The 13 dimensions posed as multiple-choice questions.
    pub fn mcq() -> impl Iterator<Item = AttributeDimension> {
        Self::ALL.into_iter().filter(|d| d.is_mcq())
    }

    pub fn is_mcq(self) -> bool {
        self != AttributeDimension::Tpt
    }

    pub fn abbrev(self) -> &'static str {
        use AttributeDimension::*;
        match self {
            Gen => "GEN",
            Age => "AGE",
            Acc => "ACC",
            Pit => "PIT",
            Sr => "SR",
            Rhy => "RHY",
            Vt => "VT",
            Emo => "EMO",
            Ton => "TON",
            Ci => "CI",
            Bs => "BS",
            Ae => "AE",
            Pe => "PE",
            Tpt => "TPT",
        }
    }

    pub fn display_name(self) -> &'static str {
        use AttributeDimension::*;
        match self {
            Gen => "Gender",
            Age => "Age",
            Acc => "Accent",
            Pit => "Pitch",
            Sr => "Speaking Rate",
            Rhy => "Rhythm",
            Vt => "Voice Texture",
            Emo => "Emotion",
            Ton => "Tone",
            Ci => "Contextual Inference",
            Bs => "Background Sound",
            Ae => "Acoustic Environment",
            Pe => "Paralinguistic Events",
            Tpt => "Transcription with Paralinguistic Tags",
        }
    }

    /// Key of the record field holding this dimension.
    pub fn field_name(self) -> &'static str {
        use AttributeDimension::*;
        match self {
            Gen => "gender",
            Age => "age",
            Acc => "accent",
            Pit => "pitch",
            Sr => "speaking_rate",
            Rhy => "rhythm",
            Vt => "voice_texture",
            Emo => "emotion",
            Ton => "tone",
            Ci => "contextual_inference",
            Bs => "background_sound",
            Ae => "acoustic_environment",
            Pe => "paralinguistic_events",
            Tpt => "transcript_tagged",
        }
    }

    pub fn tier(self) -> Tier {
        use AttributeDimension::*;
        match self {
            Gen | Age | Acc => Tier::SpeakerDemographics,
            Pit | Sr | Rhy | Vt => Tier::AcousticProsodic,
            Emo | Ton | Ci => Tier::AffectiveSemantic,
            Bs | Ae => Tier::AcousticScene,
            Pe | Tpt => Tier::LinguisticParalinguistic,
        }
    }
}

impl fmt::Display for AttributeDimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.abbrev())
    }
}

impl FromStr for AttributeDimension {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        Self::ALL
            .into_iter()
            .find(|d| d.abbrev().eq_ignore_ascii_case(s) || d.field_name() == s)
            .ok_or_else(|| format!("unknown dimension `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown tag `{0}`")]
pub struct UnknownTag(pub String);

/// Closed set of paralinguistic tag categories.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagVocabulary {
    categories: Vec<String>,
}

impl Default for TagVocabulary {
    fn default() -> Self {
        Self::new([
            "Laughter",
            "Crying",
            "Sighing",
            "Breathing",
            "Coughing",
            "Gasping",
            "Screaming",
            "Sniffing",
        ])
    }
}

impl TagVocabulary {
    pub fn new<I, S>(categories: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut out: Vec<String> = Vec::new();
        for c in categories {
            let c = c.into().trim().to_string();
            if !c.is_empty() && !out.iter().any(|o| o.to_lowercase() == c.to_lowercase()) {
                out.push(c);
            }
        }
        Self { categories: out }
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    /// Case-insensitive, whitespace-trimmed lookup.
    pub fn canonicalize(&self, name: &str) -> Result<&str, UnknownTag> {
        let needle = name.trim().to_lowercase();
        self.categories
            .iter()
            .find(|c| c.to_lowercase() == needle)
            .map(String::as_str)
            .ok_or_else(|| UnknownTag(name.trim().to_string()))
    }
}

/// A paralinguistic event anchored at its index in the uniform token
/// sequence of the tagged transcript.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tag {
    pub category: String,
    pub anchor_index: usize,
}

impl Tag {
    /// Tags of a tokenized transcript, in order.
    pub fn from_tokens(tokens: &[UniformToken]) -> Vec<Tag> {
        tokens
            .iter()
            .enumerate()
            .filter_map(|(i, t)| match t {
                UniformToken::Tag(c) => Some(Tag { category: c.clone(), anchor_index: i }),
                UniformToken::Text(_) => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    PipelineStage1,
    PipelineStage2,
    ExternalIngest,
}

/// One utterance's full annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub utterance_id: String,
    pub audio_path: String,
    pub language: Language,
    pub duration_s: f64,
    pub transcript: String,
    pub transcript_tagged: String,
    pub gender: String,
    pub age: String,
    pub accent: String,
    pub pitch: String,
    pub speaking_rate: String,
    pub rhythm: String,
    pub voice_texture: String,
    pub emotion: String,
    pub tone: String,
    pub contextual_inference: String,
    pub background_sound: String,
    pub acoustic_environment: String,
    pub paralinguistic_events: Vec<Tag>,
    pub schema_version: String,
    pub provenance: Provenance,
}

impl AnnotationRecord {
    /// Free-text value of a dimension. Paralinguistic events are rendered as
    /// a sentence; TPT yields the tagged transcript.
    pub fn dimension_text(&self, dim: AttributeDimension) -> String {
        use AttributeDimension::*;
        match dim {
            Gen => self.gender.clone(),
            Age => self.age.clone(),
            Acc => self.accent.clone(),
            Pit => self.pitch.clone(),
            Sr => self.speaking_rate.clone(),
            Rhy => self.rhythm.clone(),
            Vt => self.voice_texture.clone(),
            Emo => self.emotion.clone(),
            Ton => self.tone.clone(),
            Ci => self.contextual_inference.clone(),
            Bs => self.background_sound.clone(),
            Ae => self.acoustic_environment.clone(),
            Pe => describe_events(&self.paralinguistic_events),
            Tpt => self.transcript_tagged.clone(),
        }
    }

    /// Mutable handle on a free-text dimension; `None` for PE.
    pub fn dimension_text_mut(&mut self, dim: AttributeDimension) -> Option<&mut String> {
        use AttributeDimension::*;
        Some(match dim {
            Gen => &mut self.gender,
            Age => &mut self.age,
            Acc => &mut self.accent,
            Pit => &mut self.pitch,
            Sr => &mut self.speaking_rate,
            Rhy => &mut self.rhythm,
            Vt => &mut self.voice_texture,
            Emo => &mut self.emotion,
            Ton => &mut self.tone,
            Ci => &mut self.contextual_inference,
            Bs => &mut self.background_sound,
            Ae => &mut self.acoustic_environment,
            Tpt => &mut self.transcript_tagged,
            Pe => return None,
        })
    }

    /// Recomputes `paralinguistic_events` from `transcript_tagged`.
    pub fn sync_events(&mut self, vocab: &TagVocabulary) -> Result<(), TokenizeError> {
        let tokens = metrics::tokenize(&self.transcript_tagged, self.language, vocab)?;
        self.paralinguistic_events = Tag::from_tokens(&tokens);
        Ok(())
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("record serializes")
    }

    /// Single-line JSON.
    pub fn emit(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

fn describe_events(events: &[Tag]) -> String {
    if events.is_empty() {
        return "No paralinguistic events are present.".to_string();
    }
    let mut seen: Vec<&str> = Vec::new();
    for e in events {
        if !seen.contains(&e.category.as_str()) {
            seen.push(&e.category);
        }
    }
    seen.iter()
        .map(|c| format!("The speaker makes a {} sound.", c.to_lowercase()))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("document is not a JSON object: {0}")]
    Malformed(String),
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("missing or empty dimension {dim} (`{field}`)", dim = .0, field = .0.field_name())]
    MissingDimension(AttributeDimension),
    #[error("field `{field}`: {rule}")]
    InvalidField { field: String, rule: String },
    #[error("unknown tag `{0}`")]
    UnknownTag(String),
    #[error("field `transcript_tagged`: {0}")]
    MalformedTag(String),
    #[error("tagged transcript does not match plain transcript once tags are removed")]
    TagTranscriptMismatch,
    #[error("paralinguistic_events do not match the tags in transcript_tagged")]
    EventsMismatch,
    #[error("unsupported schema version `{0}`")]
    BadSchemaVersion(String),
}

impl ValidationError {
    /// Field the error is about, when there is one.
    pub fn field(&self) -> Option<&str> {
        match self {
            ValidationError::Malformed(_) => None,
            ValidationError::MissingField(f) => Some(f),
            ValidationError::MissingDimension(d) => Some(d.field_name()),
            ValidationError::InvalidField { field, .. } => Some(field),
            ValidationError::UnknownTag(_)
            | ValidationError::MalformedTag(_)
            | ValidationError::TagTranscriptMismatch => Some("transcript_tagged"),
            ValidationError::EventsMismatch => Some("paralinguistic_events"),
            ValidationError::BadSchemaVersion(_) => Some("schema_version"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ValidationErrors(pub Vec<ValidationError>);

impl ValidationErrors {
    pub fn contains(&self, e: &ValidationError) -> bool {
        self.0.contains(e)
    }
}

impl fmt::Display for ValidationErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        write!(f, "{}", parts.join("; "))
    }
}

impl From<ValidationError> for ValidationErrors {
    fn from(e: ValidationError) -> Self {
        ValidationErrors(vec![e])
    }
}

/// Parses and validates a record from JSON text.
pub fn validate_record(raw: &str, vocab: &TagVocabulary) -> Result<AnnotationRecord, ValidationErrors> {
    let value: Value =
        serde_json::from_str(raw).map_err(|e| ValidationError::Malformed(e.to_string()))?;
    validate_value(&value, vocab)
}

pub fn validate_value(value: &Value, vocab: &TagVocabulary) -> Result<AnnotationRecord, ValidationErrors> {
    let obj = value
        .as_object()
        .ok_or_else(|| ValidationError::Malformed("expected an object".into()))?;
    let mut errors = Vec::new();

    match obj.get("schema_version") {
        None | Some(Value::Null) => errors.push(ValidationError::MissingField("schema_version")),
        Some(Value::String(v)) if SUPPORTED_SCHEMA_VERSIONS.contains(&v.as_str()) => {}
        Some(other) => errors.push(ValidationError::BadSchemaVersion(match other {
            Value::String(s) => s.clone(),
            v => v.to_string(),
        })),
    }

    for key in ["utterance_id", "audio_path"] {
        match obj.get(key) {
            Some(Value::String(s)) if !s.trim().is_empty() => {}
            Some(Value::String(_)) | None | Some(Value::Null) => {
                errors.push(ValidationError::MissingField(key))
            }
            Some(_) => errors.push(invalid(key, "must be a string")),
        }
    }
    match obj.get("transcript") {
        Some(Value::String(_)) => {}
        None | Some(Value::Null) => errors.push(ValidationError::MissingField("transcript")),
        Some(_) => errors.push(invalid("transcript", "must be a string")),
    }
    match obj.get("language") {
        None | Some(Value::Null) => errors.push(ValidationError::MissingField("language")),
        Some(v) if serde_json::from_value::<Language>(v.clone()).is_err() => {
            errors.push(invalid("language", "must be ZH or EN"))
        }
        Some(_) => {}
    }
    match obj.get("duration_s") {
        None | Some(Value::Null) => errors.push(ValidationError::MissingField("duration_s")),
        Some(Value::Number(n)) if n.as_f64().is_some_and(|d| d.is_finite() && d >= 0.0) => {}
        Some(_) => errors.push(invalid("duration_s", "must be a non-negative number")),
    }
    match obj.get("provenance") {
        None | Some(Value::Null) => errors.push(ValidationError::MissingField("provenance")),
        Some(v) if serde_json::from_value::<Provenance>(v.clone()).is_err() => errors.push(invalid(
            "provenance",
            "must be PipelineStage1, PipelineStage2 or ExternalIngest",
        )),
        Some(_) => {}
    }

    for dim in AttributeDimension::ALL {
        let key = dim.field_name();
        match (dim, obj.get(key)) {
            (AttributeDimension::Pe, Some(Value::Array(_))) => {}
            (AttributeDimension::Pe, Some(Value::Null) | None) => {
                errors.push(ValidationError::MissingDimension(dim))
            }
            (AttributeDimension::Pe, Some(_)) => errors.push(invalid(key, "must be a list of tags")),
            (_, Some(Value::String(s))) if !s.trim().is_empty() => {}
            (_, Some(Value::String(_)) | Some(Value::Null) | None) => {
                errors.push(ValidationError::MissingDimension(dim))
            }
            (_, Some(_)) => errors.push(invalid(key, "must be a string")),
        }
    }

    if !errors.is_empty() {
        return Err(ValidationErrors(errors));
    }

    let mut record: AnnotationRecord = serde_json::from_value(value.clone())
        .map_err(|e| ValidationError::Malformed(e.to_string()))?;

    let tagged = match metrics::tokenize(&record.transcript_tagged, record.language, vocab) {
        Ok(t) => t,
        Err(TokenizeError::UnknownTag(name)) => return Err(ValidationError::UnknownTag(name).into()),
        Err(e @ TokenizeError::MalformedTag { .. }) => {
            return Err(ValidationError::MalformedTag(e.to_string()).into())
        }
    };
    let plain = match metrics::tokenize(&record.transcript, record.language, vocab) {
        Ok(t) if t.iter().all(|t| !t.is_tag()) => t,
        Ok(_) => return Err(invalid("transcript", "must not contain tags").into()),
        Err(e) => return Err(invalid("transcript", &e.to_string()).into()),
    };
    if metrics::text_tokens(&tagged) != metrics::text_tokens(&plain) {
        errors.push(ValidationError::TagTranscriptMismatch);
    }

    let mut events = Vec::with_capacity(record.paralinguistic_events.len());
    for ev in &record.paralinguistic_events {
        match vocab.canonicalize(&ev.category) {
            Ok(c) => events.push(Tag { category: c.to_string(), anchor_index: ev.anchor_index }),
            Err(UnknownTag(name)) => errors.push(ValidationError::UnknownTag(name)),
        }
    }
    if errors.is_empty() && events != Tag::from_tokens(&tagged) {
        errors.push(ValidationError::EventsMismatch);
    }
    if !errors.is_empty() {
        return Err(ValidationErrors(errors));
    }
    record.paralinguistic_events = events;
    Ok(record)
}

fn invalid(field: &str, rule: &str) -> ValidationError {
    ValidationError::InvalidField { field: field.to_string(), rule: rule.to_string() }
}

/// Outcome of a quality filter stored alongside a manifest record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum QualityMark {
    Flag(bool),
    Score(f64),
}

/// One manifest line: the record's fields flattened at top level, plus an
/// optional `quality` map.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub record: AnnotationRecord,
    pub quality: Option<BTreeMap<String, QualityMark>>,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {errors}")]
    Invalid { line: usize, errors: ValidationErrors },
}

impl ManifestEntry {
    pub fn new(record: AnnotationRecord) -> Self {
        Self { record, quality: None }
    }

    pub fn parse_line(line: &str, vocab: &TagVocabulary) -> Result<Self, ValidationErrors> {
        let mut value: Value =
            serde_json::from_str(line).map_err(|e| ValidationError::Malformed(e.to_string()))?;
        let quality = match value.as_object_mut().and_then(|o| o.remove("quality")) {
            None | Some(Value::Null) => None,
            Some(q) => Some(
                serde_json::from_value(q)
                    .map_err(|e| invalid("quality", &format!("bad quality map: {e}")))?,
            ),
        };
        let record = validate_value(&value, vocab)?;
        Ok(Self { record, quality })
    }

    pub fn to_line(&self) -> String {
        let mut value = self.record.to_value();
        if let Some(q) = &self.quality {
            value["quality"] = serde_json::to_value(q).expect("quality map serializes");
        }
        value.to_string()
    }

    pub fn quality_score(&self, key: &str) -> Option<f64> {
        match self.quality.as_ref()?.get(key)? {
            QualityMark::Score(s) => Some(*s),
            QualityMark::Flag(_) => None,
        }
    }

    pub fn set_quality(&mut self, key: &str, mark: QualityMark) {
        self.quality.get_or_insert_with(BTreeMap::new).insert(key.to_string(), mark);
    }
}

pub fn parse_manifest(text: &str, vocab: &TagVocabulary) -> Result<Vec<ManifestEntry>, ManifestError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            ManifestEntry::parse_line(l, vocab).map_err(|errors| ManifestError::Invalid { line: i + 1, errors })
        })
        .collect()
}

pub fn read_manifest(
    path: impl AsRef<std::path::Path>,
    vocab: &TagVocabulary,
) -> Result<Vec<ManifestEntry>, ManifestError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| ManifestError::Io { path: path.display().to_string(), source })?;
    parse_manifest(&text, vocab)
}

pub fn render_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&e.to_line());
        out.push('\n');
    }
    out
}

pub fn write_manifest(path: impl AsRef<std::path::Path>, entries: &[ManifestEntry]) -> Result<(), ManifestError> {
    let path = path.as_ref();
    std::fs::write(path, render_manifest(entries))
        .map_err(|source| ManifestError::Io { path: path.display().to_string(), source })
}

pub mod fixtures {
    //! Builders for valid records, used by tests, mocks and examples.

    use super::*;

    /// A complete, valid record. `tagged` is the tagged transcript; the plain
    /// transcript and event list are derived from it.
    pub fn record(id: &str, language: Language, tagged: &str) -> AnnotationRecord {
        let vocab = TagVocabulary::default();
        let tokens = metrics::tokenize(tagged, language, &vocab).expect("fixture transcript is valid");
        let plain: Vec<&str> = metrics::text_tokens(&tokens);
        let transcript = match language {
            Language::En => plain.join(" "),
            Language::Zh => plain.concat(),
        };
        AnnotationRecord {
            utterance_id: id.to_string(),
            audio_path: format!("audio/{id}.wav"),
            language,
            duration_s: 4.0,
            transcript,
            transcript_tagged: tagged.to_string(),
            gender: "Male".into(),
            age: "Young Adult (19-35 years old)".into(),
            accent: "The speaker has a North American accent.".into(),
            pitch: "Low-pitched with a relatively flat intonation.".into(),
            speaking_rate: "Medium, with a consistent and even pace.".into(),
            rhythm: "The rhythm is fluent and coherent, delivered as a seamless whole.".into(),
            voice_texture: "Full and resonant, with a subtle, consistent grainy texture.".into(),
            emotion: "Defensive yet deeply sorrowful".into(),
            tone: "A doubtful questioning tone".into(),
            contextual_inference: "A character is explaining the futility of escape.".into(),
            background_sound: "Light, playful background music".into(),
            acoustic_environment: "Inferred as a studio or professional recording room.".into(),
            paralinguistic_events: Tag::from_tokens(&tokens),
            schema_version: SCHEMA_VERSION.to_string(),
            provenance: Provenance::PipelineStage2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::record;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fourteen_dimensions_five_tiers() {
        assert_eq!(AttributeDimension::ALL.len(), 14);
        let tiers: std::collections::BTreeSet<Tier> =
            AttributeDimension::ALL.iter().map(|d| d.tier()).collect();
        assert_eq!(tiers.len(), 5);
        assert_eq!(AttributeDimension::mcq().count(), 13);
        assert_eq!(AttributeDimension::Vt.tier(), Tier::AcousticProsodic);
        assert_eq!(AttributeDimension::Ci.tier(), Tier::AffectiveSemantic);
        assert_eq!("tpt".parse::<AttributeDimension>().unwrap(), AttributeDimension::Tpt);
    }

    #[test]
    fn canonicalize_tags() {
        let v = TagVocabulary::default();
        assert_eq!(v.canonicalize("laughter").unwrap(), "Laughter");
        assert_eq!(v.canonicalize("  Crying ").unwrap(), "Crying");
        assert_eq!(v.canonicalize("Yodeling"), Err(UnknownTag("Yodeling".into())));
    }

    #[test]
    fn complete_record_validates() {
        let r = record("u1", Language::En, "<Crying> You gotta hide me.");
        let back = validate_record(&r.emit(), &TagVocabulary::default()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.paralinguistic_events, vec![Tag { category: "Crying".into(), anchor_index: 0 }]);
    }

    #[test]
    fn missing_voice_texture() {
        let r = record("u1", Language::En, "hello there");
        let mut v = r.to_value();
        v.as_object_mut().unwrap().remove("voice_texture");
        let errs = validate_value(&v, &TagVocabulary::default()).unwrap_err();
        assert!(errs.contains(&ValidationError::MissingDimension(AttributeDimension::Vt)));
        v["tone"] = Value::String("  ".into());
        let errs = validate_value(&v, &TagVocabulary::default()).unwrap_err();
        assert!(errs.contains(&ValidationError::MissingDimension(AttributeDimension::Ton)));
        assert_eq!(errs.0.len(), 2);
    }

    #[test]
    fn mismatched_transcripts() {
        let mut r = record("u1", Language::En, "<Crying> you gotta hide me");
        r.transcript = "you gotta run".into();
        let errs = validate_record(&r.emit(), &TagVocabulary::default()).unwrap_err();
        assert_eq!(errs.0, vec![ValidationError::TagTranscriptMismatch]);
    }

    #[test]
    fn unknown_tag_and_bad_version() {
        let mut r = record("u1", Language::En, "hi");
        r.transcript_tagged = "<Yodeling> hi".into();
        let errs = validate_record(&r.emit(), &TagVocabulary::default()).unwrap_err();
        assert_eq!(errs.0, vec![ValidationError::UnknownTag("Yodeling".into())]);

        let mut r = record("u1", Language::En, "hi");
        r.schema_version = "0.9".into();
        let errs = validate_record(&r.emit(), &TagVocabulary::default()).unwrap_err();
        assert_eq!(errs.0, vec![ValidationError::BadSchemaVersion("0.9".into())]);
    }

    #[test]
    fn events_must_match_tags() {
        let mut r = record("u1", Language::En, "hi <Laughter> there");
        r.paralinguistic_events.clear();
        let errs = validate_record(&r.emit(), &TagVocabulary::default()).unwrap_err();
        assert_eq!(errs.0, vec![ValidationError::EventsMismatch]);
        // Case differences in event categories are canonicalized.
        let mut r = record("u1", Language::En, "hi <Laughter> there");
        r.paralinguistic_events[0].category = "LAUGHTER".into();
        let back = validate_record(&r.emit(), &TagVocabulary::default()).unwrap();
        assert_eq!(back.paralinguistic_events[0].category, "Laughter");
    }

    #[test]
    fn manifest_line_keeps_quality() {
        let mut e = ManifestEntry::new(record("u1", Language::Zh, "你好<Sighing>吗"));
        e.set_quality("wer", QualityMark::Score(0.05));
        e.set_quality("emotion", QualityMark::Flag(true));
        let back = ManifestEntry::parse_line(&e.to_line(), &TagVocabulary::default()).unwrap();
        assert_eq!(back, e);
        assert_eq!(back.quality_score("wer"), Some(0.05));
    }

    fn arb_record() -> impl Strategy<Value = AnnotationRecord> {
        let word = prop::sample::select(vec!["alpha", "beta", "gamma", "delta", "omega"]);
        let tag = prop::sample::select(vec!["<Laughter>", "<Crying>", "<sighing>", "<Breathing>"]);
        let piece = prop_oneof![3 => word.prop_map(str::to_string), 1 => tag.prop_map(str::to_string)];
        (prop::collection::vec(piece, 1..12), 0.0f64..1e4, "[a-z0-9]{1,8}").prop_map(|(pieces, dur, id)| {
            let mut r = record(&id, Language::En, &pieces.join(" "));
            r.duration_s = dur;
            r.sync_events(&TagVocabulary::default()).unwrap();
            r
        })
    }

    proptest! {
        #[test]
        fn emit_validate_round_trip(r in arb_record()) {
            let back = validate_record(&r.emit(), &TagVocabulary::default()).unwrap();
            prop_assert_eq!(back, r);
        }
    }
}
