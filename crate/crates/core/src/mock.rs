//! Deterministic in-process backend implementing every endpoint of the wire
//! contract. It stands in for the annotator, the expert classifiers, the
//! MCQ generator, evaluated models and the response aligner in tests and
//! demos; the `mock-backend` CLI command serves it over HTTP.

use std::collections::HashMap;

use serde_json::{json, Map, Value};

use crate::backend::{endpoints, Backend, BackendError};
use crate::crossval::{IntensityScale, Level};
use crate::schema::{fixtures, AnnotationRecord, AttributeDimension, Language, TagVocabulary};
use crate::metrics;

/// How the mock answers `/v1/choose`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum ChoosePolicy {
    /// Letter of the registered key; `A` for unknown items.
    #[default]
    Key,
    /// Always this raw text.
    Fixed(String),
    /// A sentence quoting the key option's text (needs the aligner).
    FreeText,
}

/// How the mock answers `/v1/transcribe-tagged`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum TaggedPolicy {
    /// The reference tagged transcript.
    #[default]
    EchoReference,
    /// The reference with every tag removed.
    StripTags,
    /// The reference with a `<Laughter>` tag prepended.
    FabricateTag,
}

#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    records: HashMap<String, AnnotationRecord>,
    answer_key: HashMap<String, usize>,
    choose: ChoosePolicy,
    tagged: TaggedPolicy,
    stage1_shift: f64,
    overrides: Vec<(String, Value)>,
    removed: Vec<String>,
    expert_overrides: HashMap<(String, String), Value>,
}

const IDENTITY_FIELDS: [&str; 7] =
    ["utterance_id", "audio_path", "language", "duration_s", "schema_version", "provenance", "paralinguistic_events"];

fn letter(i: usize) -> String {
    char::from(b'A' + i as u8).to_string()
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Ground truth the expert and model endpoints answer from, keyed by
    /// utterance id.
    pub fn with_records<I: IntoIterator<Item = AnnotationRecord>>(mut self, records: I) -> Self {
        self.records.extend(records.into_iter().map(|r| (r.utterance_id.clone(), r)));
        self
    }

    /// Answer key for `/v1/choose`, keyed by item id.
    pub fn with_answer_key<I: IntoIterator<Item = (String, usize)>>(mut self, key: I) -> Self {
        self.answer_key.extend(key);
        self
    }

    pub fn with_choose_policy(mut self, policy: ChoosePolicy) -> Self {
        self.choose = policy;
        self
    }

    pub fn with_tagged_policy(mut self, policy: TaggedPolicy) -> Self {
        self.tagged = policy;
        self
    }

    /// Stage-1 answers move every timestamp by `shift` seconds.
    pub fn with_stage1_shift(mut self, shift: f64) -> Self {
        self.stage1_shift = shift;
        self
    }

    /// Stage-2/ingest answers carry `value` in `field`.
    pub fn with_override(mut self, field: &str, value: &str) -> Self {
        self.overrides.push((field.to_string(), Value::String(value.to_string())));
        self
    }

    /// Stage-2/ingest answers omit `field`.
    pub fn without_field(mut self, field: &str) -> Self {
        self.removed.push(field.to_string());
        self
    }

    /// Replaces an expert's answer for one utterance. `kind` is `transcribe`,
    /// `emotion`, `intensity`, `demographics` or `paralinguistic`.
    pub fn with_expert_answer(mut self, utterance_id: &str, kind: &str, answer: Value) -> Self {
        self.expert_overrides.insert((utterance_id.to_string(), kind.to_string()), answer);
        self
    }

    fn record_for(&self, req: &Value) -> Result<&AnnotationRecord, BackendError> {
        let id = req["utterance_id"].as_str().unwrap_or_default();
        self.records.get(id).ok_or_else(|| BackendError::Rejected(format!("unknown utterance `{id}`")))
    }

    fn annotate(&self, req: &Value) -> Result<Value, BackendError> {
        let priors = &req["priors"];
        match req["stage"].as_str() {
            Some("Macro") => {
                let language: Language = serde_json::from_value(priors["language"].clone()).unwrap_or(Language::En);
                let utts = priors["utterances"].as_array().cloned().unwrap_or_default();
                let out: Vec<Value> = utts
                    .iter()
                    .map(|u| {
                        let shift = |k: &str| u[k].as_f64().unwrap_or(0.0) + self.stage1_shift;
                        json!({
                            "prior_ids": [u["id"]],
                            "start_s": shift("start_s"),
                            "end_s": shift("end_s"),
                            "transcript": strip_tags(u["transcript"].as_str().unwrap_or_default(), language),
                            "transcript_tagged": u["transcript"],
                            "contextual_inference": "A conversation between two people.",
                            "background_sound": "No obvious background sound.",
                            "acoustic_environment": "Inferred as a quiet indoor room.",
                            "speaker_id": u["speaker_id"],
                        })
                    })
                    .collect();
                Ok(json!({ "utterances": out, "dropped": [] }))
            }
            Some(stage @ ("Micro" | "Ingest")) => {
                let mut doc = match fixtures::record("mock", Language::En, "mock").to_value() {
                    Value::Object(m) => m,
                    _ => unreachable!(),
                };
                for k in IDENTITY_FIELDS {
                    doc.remove(k);
                }
                if stage == "Micro" {
                    for k in ["transcript", "transcript_tagged", "contextual_inference", "background_sound", "acoustic_environment"] {
                        if let Some(v) = priors.get(k) {
                            doc.insert(k.into(), v.clone());
                        }
                    }
                } else {
                    doc.insert("transcript".into(), priors["transcript"].clone());
                    doc.insert("transcript_tagged".into(), priors["transcript"].clone());
                    if let Some(c) = priors.get("context") {
                        doc.insert("contextual_inference".into(), c.clone());
                    }
                }
                self.adjust(&mut doc);
                Ok(Value::Object(doc))
            }
            other => Err(BackendError::Rejected(format!("unknown stage {other:?}"))),
        }
    }

    fn adjust(&self, doc: &mut Map<String, Value>) {
        for k in &self.removed {
            doc.remove(k);
        }
        for (k, v) in &self.overrides {
            doc.insert(k.clone(), v.clone());
        }
    }

    fn expert(&self, kind: &str, req: &Value) -> Result<Value, BackendError> {
        let r = self.record_for(req)?;
        if let Some(v) = self.expert_overrides.get(&(r.utterance_id.clone(), kind.to_string())) {
            return Ok(v.clone());
        }
        let level = |l: Level| match l {
            Level::Low => "Low",
            Level::Medium => "Medium",
            Level::High => "High",
            Level::Unknown => "Unknown",
        };
        Ok(match kind {
            "transcribe" => json!({ "text": r.transcript }),
            "emotion" => json!({ "label": r.emotion }),
            "intensity" => {
                let s = IntensityScale::default();
                json!({ "pitch": level(s.pitch_level(&r.pitch)), "rate": level(s.rate_level(&r.speaking_rate)) })
            }
            "demographics" => json!({ "age": r.age, "gender": r.gender, "accent": r.accent }),
            "paralinguistic" => json!({ "present": !r.paralinguistic_events.is_empty() }),
            other => return Err(BackendError::Rejected(format!("unknown classifier kind `{other}`"))),
        })
    }

    fn generate_mcq(&self, req: &Value) -> Result<Value, BackendError> {
        let dim: AttributeDimension = req["dimension"]
            .as_str()
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| BackendError::Rejected("bad dimension".into()))?;
        let truth = req["ground_truth"].as_str().unwrap_or_default().to_string();
        let n = req["n_options"].as_u64().unwrap_or(5).max(2) as usize;
        let mut distractors: Vec<String> = distractor_pool(dim)
            .iter()
            .map(|s| s.to_string())
            .filter(|s| !s.eq_ignore_ascii_case(&truth))
            .collect();
        let mut k = 1;
        while distractors.len() < n - 1 {
            distractors.push(format!("{truth} (alternative reading {k})"));
            k += 1;
        }
        distractors.truncate(n - 1);
        let mut options = vec![json!({ "text": truth, "klass": "GroundTruth", "correct": true })];
        let last = distractors.len() - 1;
        for (i, d) in distractors.into_iter().enumerate() {
            let klass = if i == last { "SemanticTrap" } else { "FineGrainedAcoustic" };
            options.push(json!({ "text": d, "klass": klass, "correct": false }));
        }
        Ok(json!({ "stem": crate::bench::default_stem(dim), "options": options, "semantic_conflict": false }))
    }

    fn choose(&self, req: &Value) -> Result<Value, BackendError> {
        let item = req["item_id"].as_str().unwrap_or_default();
        let options: Vec<&str> = req["options"].as_array().map(|a| a.iter().filter_map(Value::as_str).collect()).unwrap_or_default();
        let text = match &self.choose {
            ChoosePolicy::Fixed(t) => t.clone(),
            ChoosePolicy::Key => self.answer_key.get(item).map_or_else(|| "A".to_string(), |&i| letter(i)),
            ChoosePolicy::FreeText => match self.answer_key.get(item).and_then(|&i| options.get(i)) {
                Some(t) => format!("Listening closely, I would say: {t}"),
                None => "I am not sure.".to_string(),
            },
        };
        Ok(json!({ "text": text }))
    }

    fn transcribe_tagged(&self, req: &Value) -> Result<Value, BackendError> {
        let r = self.record_for(req)?;
        let text = match self.tagged {
            TaggedPolicy::EchoReference => r.transcript_tagged.clone(),
            TaggedPolicy::StripTags => strip_tags(&r.transcript_tagged, r.language),
            TaggedPolicy::FabricateTag => format!("<Laughter> {}", r.transcript_tagged),
        };
        Ok(json!({ "text": text }))
    }
}

/// Plain transcript of a tagged one.
fn strip_tags(tagged: &str, language: Language) -> String {
    let tokens = metrics::tokenize_lenient(tagged, language, &TagVocabulary::default());
    let words = metrics::text_tokens(&tokens);
    match language {
        Language::En => words.join(" "),
        Language::Zh => words.concat(),
    }
}

/// Exact-match aligner: the longest option whose text occurs in the raw
/// answer (case-insensitive; earliest option on a tie), or `null`.
pub fn exact_match_align(raw: &str, options: &[&str]) -> Option<usize> {
    let raw = raw.to_lowercase();
    let mut best: Option<(usize, usize)> = None;
    for (i, o) in options.iter().enumerate() {
        let o = o.trim().to_lowercase();
        if !o.is_empty() && raw.contains(&o) && best.is_none_or(|(_, len)| o.len() > len) {
            best = Some((i, o.len()));
        }
    }
    best.map(|(i, _)| i)
}

impl Backend for MockBackend {
    fn call(&self, endpoint: &str, req: &Value) -> Result<Value, BackendError> {
        match endpoint {
            endpoints::ANNOTATE => self.annotate(req),
            endpoints::TRANSCRIBE => self.expert("transcribe", req),
            endpoints::CLASSIFY => {
                let kind = req["kind"].as_str().unwrap_or_default().to_string();
                self.expert(&kind, req)
            }
            endpoints::GENERATE_MCQ => self.generate_mcq(req),
            endpoints::CHOOSE => self.choose(req),
            endpoints::TRANSCRIBE_TAGGED => self.transcribe_tagged(req),
            endpoints::ALIGN => {
                let raw = req["raw_text"].as_str().unwrap_or_default();
                let options: Vec<&str> =
                    req["options"].as_array().map(|a| a.iter().filter_map(Value::as_str).collect()).unwrap_or_default();
                Ok(json!({ "index": exact_match_align(raw, &options) }))
            }
            other => Err(BackendError::Rejected(format!("unknown endpoint {other}"))),
        }
    }
}

fn distractor_pool(dim: AttributeDimension) -> &'static [&'static str] {
    use AttributeDimension::*;
    match dim {
        Gen => &["Male", "Female"],
        Age => &[
            "Child (0-12 years old)",
            "Teenager (13-18 years old)",
            "Young Adult (19-35 years old)",
            "Middle-aged (36-59 years old)",
            "Senior (60+ years old)",
        ],
        Acc => &[
            "The speaker has an English accent.",
            "The speaker has an Australian accent.",
            "The speaker has an Indian accent.",
            "The speaker has a North American accent.",
        ],
        Pit => &[
            "Low-pitched with severe fluctuations.",
            "High-pitched with a relatively flat intonation.",
            "Medium-pitched with a rising intonation.",
            "Low-pitched with a relatively flat intonation.",
        ],
        Sr => &[
            "Medium, but with a noticeable deceleration.",
            "Fast, with a hurried and uneven pace.",
            "Slow, with long pauses between phrases.",
            "Medium, with a consistent and even pace.",
        ],
        Rhy => &[
            "The rhythm is fragmented and disjointed.",
            "The rhythm is halting, with frequent hesitations.",
            "The rhythm is sing-song and exaggerated.",
            "The rhythm is fluent and coherent, delivered as a seamless whole.",
        ],
        Vt => &[
            "Full and resonant, with an exceptionally clear tone.",
            "Thin and breathy, with a slight rasp.",
            "Hoarse and strained throughout.",
            "Full and resonant, with a subtle, consistent grainy texture.",
        ],
        Emo => &["Defensive and exasperated", "Calm and content", "Cheerful and excited", "Defensive yet deeply sorrowful"],
        Ton => &["A bewildered inquiring tone", "A firm declarative tone", "A sarcastic mocking tone", "A doubtful questioning tone"],
        Ci => &[
            "A character is lamenting a personal failure.",
            "A host is introducing a guest on a talk show.",
            "A teacher is explaining a math problem.",
            "A character is explaining the futility of escape.",
        ],
        Bs => &["Sounds of objects being moved and placed", "Heavy rain and distant thunder", "Crowd chatter in a cafe", "Light, playful background music"],
        Ae => &[
            "Inferred as a large, empty hall or church.",
            "Inferred as a small car interior.",
            "Inferred as an open outdoor street.",
            "Inferred as a studio or professional recording room.",
        ],
        Pe => &[
            "The speaker makes a breathing sound.",
            "The speaker makes a sighing sound.",
            "The speaker makes a laughter sound.",
            "No paralinguistic events are present.",
        ],
        Tpt => &[],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aligner_and_policies() {
        assert_eq!(exact_match_align("I pick: Female.", &["Male", "Female"]), Some(1), "longest containing option wins");
        assert_eq!(exact_match_align("nothing", &["Male", "Female"]), None);

        let r = fixtures::record("u1", Language::En, "<Laughter> hi there");
        let m = MockBackend::new().with_records([r.clone()]).with_tagged_policy(TaggedPolicy::StripTags);
        let out = m.call(endpoints::TRANSCRIBE_TAGGED, &json!({"utterance_id": "u1"})).unwrap();
        assert_eq!(out["text"], "hi there");
        let out = MockBackend::new().with_answer_key([("i1".to_string(), 2)]).call(endpoints::CHOOSE, &json!({"item_id": "i1"})).unwrap();
        assert_eq!(out["text"], "C");
    }
}
