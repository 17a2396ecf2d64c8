//! Evaluation of a model backend over a benchmark package: MCQ accuracy
//! under a direct or aligner-assisted protocol, PATA for tagged
//! transcription, and a dimension × language report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tracing::warn;

use crate::backend::{audio_payload, call_with_retry, endpoints, AudioMode, Backend, RetryPolicy};
use crate::bench::{BenchPackage, McqItem, Stratum, TptRef};
use crate::metrics::{compute_pata, PataScore, DEFAULT_ALPHA};
use crate::par;
use crate::prompts::{self, PromptTemplate};
use crate::schema::{AttributeDimension, Language, TagVocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    /// The model is asked for an option letter, parsed tolerantly.
    Direct,
    /// The model answers freely; an aligner maps the answer to an option.
    AlignerAssisted,
}

impl std::str::FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "direct" => Ok(Protocol::Direct),
            "aligner" | "aligner-assisted" | "alignerassisted" => Ok(Protocol::AlignerAssisted),
            other => Err(format!("unknown protocol `{other}` (expected direct|aligner)")),
        }
    }
}

/// How the report average is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AvgMode {
    /// Unweighted mean over all present (dimension, language) cells.
    #[default]
    Flat,
    /// Mean over dimensions of each dimension's ZH/EN mean.
    PerTask,
}

impl std::str::FromStr for AvgMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "flat" => Ok(AvgMode::Flat),
            "per-task" | "pertask" | "task" => Ok(AvgMode::PerTask),
            other => Err(format!("unknown avg mode `{other}` (expected flat|per-task)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnswerStatus {
    Answered,
    Unparseable,
    BackendFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAnswer {
    pub item_id: String,
    pub dimension: AttributeDimension,
    pub language: Language,
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aligned_index: Option<usize>,
    pub status: AnswerStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ModelAnswer {
    /// The index used for scoring, whichever protocol produced it.
    pub fn index(&self) -> Option<usize> {
        self.chosen_index.or(self.aligned_index)
    }

    pub fn stratum(&self) -> Stratum {
        Stratum { dimension: self.dimension, language: self.language }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("aligner-assisted evaluation needs an aligner backend")]
    MissingAligner,
    #[error(transparent)]
    Prompt(#[from] prompts::PromptError),
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub protocol: Protocol,
    /// Drop unparseable answers from the denominator instead of scoring
    /// them wrong.
    pub skip_unparseable: bool,
    /// Drop items whose backend call failed instead of scoring them wrong.
    pub skip_failed: bool,
    pub retry: RetryPolicy,
    pub audio_mode: AudioMode,
    pub concurrency: usize,
    pub alpha: f64,
    pub vocab: TagVocabulary,
    pub avg_mode: AvgMode,
    pub choose_template: PromptTemplate,
    pub tpt_template: PromptTemplate,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Direct,
            skip_unparseable: false,
            skip_failed: false,
            retry: RetryPolicy::default(),
            audio_mode: AudioMode::Reference,
            concurrency: 4,
            alpha: DEFAULT_ALPHA,
            vocab: TagVocabulary::default(),
            avg_mode: AvgMode::Flat,
            choose_template: PromptTemplate::builtin(prompts::MCQ_CHOOSE).expect("builtin"),
            tpt_template: PromptTemplate::builtin(prompts::TPT_TRANSCRIBE).expect("builtin"),
        }
    }
}

pub fn option_letter(i: usize) -> char {
    char::from(b'A' + (i % 26) as u8)
}

fn letter_patterns() -> &'static [Regex] {
    static P: OnceLock<Vec<Regex>> = OnceLock::new();
    P.get_or_init(|| {
        [
            // A | A. | A) | (A) | [A] | A:
            r"^[\(\[]?([A-Za-z])[\)\]]?[\.\):]?$",
            // Option A | Answer: (A) | The answer is A.
            r"(?i)^(?:the\s+)?(?:option|answer|choice)(?:\s+is)?\s*[:\-]?\s*[\(\[]?([A-Z])[\)\]]?[\.\):]?$",
        ]
        .iter()
        .map(|p| Regex::new(p).expect("valid pattern"))
        .collect()
    })
}

fn norm(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").trim_end_matches(['.', '。']).to_lowercase()
}

/// Tolerant option parser for direct answers. Accepts a bare letter with
/// common punctuation, "Option A" / "Answer: A", a letter followed by the
/// option text ("B. Female"), or the exact text of one option.
pub fn parse_option(raw: &str, options: &[&str]) -> Option<usize> {
    let text = raw.trim();
    let in_range = |c: char| {
        let i = (c.to_ascii_uppercase() as u8).checked_sub(b'A')? as usize;
        (i < options.len()).then_some(i)
    };
    for p in letter_patterns() {
        if let Some(c) = p.captures(text).and_then(|c| c.get(1)) {
            return c.as_str().chars().next().and_then(in_range);
        }
    }
    let n = norm(text);
    if let Some(i) = options.iter().position(|o| norm(o) == n) {
        return Some(i);
    }
    // "B. Female" / "(B) Female": a letter prefix that agrees with the text.
    static PREFIX: OnceLock<Regex> = OnceLock::new();
    let prefix = PREFIX.get_or_init(|| Regex::new(r"^[\(\[]?([A-Z])[\)\]\.:]\s*(.+)$").expect("valid pattern"));
    let caps = prefix.captures(text)?;
    let i = caps[1].chars().next().and_then(in_range)?;
    (norm(&caps[2]) == norm(options[i])).then_some(i)
}

fn render_options(options: &[&str]) -> String {
    options.iter().enumerate().map(|(i, o)| format!("{}. {o}", option_letter(i))).collect::<Vec<_>>().join("\n")
}

fn failed(item: &McqItem, raw: String, error: String) -> ModelAnswer {
    warn!(item = %item.item_id, %error, "model call failed");
    ModelAnswer {
        item_id: item.item_id.clone(),
        dimension: item.dimension,
        language: item.language,
        raw_text: raw,
        chosen_index: None,
        aligned_index: None,
        status: AnswerStatus::BackendFailed,
        error: Some(error),
    }
}

fn answer_item(item: &McqItem, model: &dyn Backend, aligner: Option<&dyn Backend>, cfg: &EvalConfig) -> ModelAnswer {
    let options = item.option_texts();
    let rendered = render_options(&options);
    let prompt = match cfg.choose_template.render(&[("stem", &item.stem), ("options", &rendered)]) {
        Ok(p) => p,
        Err(e) => return failed(item, String::new(), e.to_string()),
    };
    let audio = match audio_payload(&item.audio, cfg.audio_mode) {
        Ok(a) => a,
        Err(e) => return failed(item, String::new(), format!("audio: {e}")),
    };
    let request = json!({
        "item_id": item.item_id,
        "dimension": item.dimension.abbrev(),
        "language": item.language.code(),
        "audio": audio,
        "stem": item.stem,
        "options": options,
        "prompt_template_id": cfg.choose_template.id,
        "prompt": prompt,
    });
    let raw = match call_with_retry(model, endpoints::CHOOSE, &request, &cfg.retry) {
        Ok(ex) => match ex.response["text"].as_str() {
            Some(t) => t.to_string(),
            None => return failed(item, ex.response.to_string(), "response lacks `text`".into()),
        },
        Err(e) => return failed(item, String::new(), e.to_string()),
    };
    let mut answer = ModelAnswer {
        item_id: item.item_id.clone(),
        dimension: item.dimension,
        language: item.language,
        raw_text: raw,
        chosen_index: None,
        aligned_index: None,
        status: AnswerStatus::Answered,
        error: None,
    };
    match (cfg.protocol, aligner) {
        (Protocol::Direct, _) => answer.chosen_index = parse_option(&answer.raw_text, &options),
        (Protocol::AlignerAssisted, Some(aligner)) => {
            let req = json!({ "item_id": item.item_id, "raw_text": answer.raw_text, "options": options });
            match call_with_retry(aligner, endpoints::ALIGN, &req, &cfg.retry) {
                Ok(ex) => {
                    answer.aligned_index =
                        ex.response["index"].as_u64().map(|i| i as usize).filter(|&i| i < options.len())
                }
                Err(e) => return failed(item, answer.raw_text, format!("aligner: {e}")),
            }
        }
        (Protocol::AlignerAssisted, None) => unreachable!("checked by run_mcq_eval"),
    }
    if answer.index().is_none() {
        warn!(item = %item.item_id, raw = %answer.raw_text, "unparseable answer");
        answer.status = AnswerStatus::Unparseable;
    }
    answer
}

/// Asks the model every MCQ item in the package. Per-item failures are
/// recorded on the answer, never raised.
pub fn run_mcq_eval(
    package: &BenchPackage,
    model: &dyn Backend,
    aligner: Option<&dyn Backend>,
    cfg: &EvalConfig,
) -> Result<Vec<ModelAnswer>, EvalError> {
    if cfg.protocol == Protocol::AlignerAssisted && aligner.is_none() {
        return Err(EvalError::MissingAligner);
    }
    let items: Vec<&McqItem> = package.all_items().collect();
    Ok(par::map_bounded(cfg.concurrency.max(1), &items, |item| answer_item(item, model, aligner, cfg)))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
    pub skipped: usize,
}

impl Tally {
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

/// correct / total per stratum. Answers for unknown items are ignored;
/// key items with no answer count wrong.
pub fn score_accuracy(answers: &[ModelAnswer], package: &BenchPackage, cfg: &EvalConfig) -> BTreeMap<Stratum, Tally> {
    let by_id: BTreeMap<&str, &ModelAnswer> = answers.iter().map(|a| (a.item_id.as_str(), a)).collect();
    let mut out: BTreeMap<Stratum, Tally> = BTreeMap::new();
    for (stratum, items) in &package.items {
        let t = out.entry(*stratum).or_default();
        for item in items {
            let answer = by_id.get(item.item_id.as_str());
            let skip = match answer.map(|a| a.status) {
                Some(AnswerStatus::Unparseable) => cfg.skip_unparseable,
                Some(AnswerStatus::BackendFailed) => cfg.skip_failed,
                _ => false,
            };
            if skip {
                t.skipped += 1;
                continue;
            }
            t.total += 1;
            if answer.and_then(|a| a.index()) == Some(item.answer_index) {
                t.correct += 1;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TptItemScore {
    pub item_id: String,
    pub utterance_id: String,
    pub language: Language,
    pub control: bool,
    pub hypothesis: Option<String>,
    /// `None` when the model call failed; such items score 0 unless skipped.
    pub score: Option<PataScore>,
    pub pata: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TptEval {
    pub items: Vec<TptItemScore>,
    pub mean: BTreeMap<Language, f64>,
}

fn score_tpt_item(r: &TptRef, model: &dyn Backend, prompt: &str, cfg: &EvalConfig) -> TptItemScore {
    let mut out = TptItemScore {
        item_id: r.item_id.clone(),
        utterance_id: r.utterance_id.clone(),
        language: r.language,
        control: r.control,
        hypothesis: None,
        score: None,
        pata: 0.0,
        error: None,
    };
    let audio = match audio_payload(&r.audio, cfg.audio_mode) {
        Ok(a) => a,
        Err(e) => {
            out.error = Some(format!("audio: {e}"));
            return out;
        }
    };
    let request = json!({
        "item_id": r.item_id,
        "utterance_id": r.utterance_id,
        "language": r.language.code(),
        "audio": audio,
        "prompt_template_id": cfg.tpt_template.id,
        "prompt": prompt,
    });
    let text = match call_with_retry(model, endpoints::TRANSCRIBE_TAGGED, &request, &cfg.retry) {
        Ok(ex) => ex.response["text"].as_str().map(str::to_string),
        Err(e) => {
            out.error = Some(e.to_string());
            None
        }
    };
    let Some(text) = text else {
        out.error.get_or_insert_with(|| "response lacks `text`".into());
        warn!(item = %r.item_id, error = ?out.error, "tagged transcription failed");
        return out;
    };
    match compute_pata(&r.reference, &text, r.language, cfg.alpha, &cfg.vocab) {
        Ok(s) => {
            out.pata = s.pata;
            out.score = Some(s);
        }
        Err(e) => out.error = Some(format!("scoring: {e}")),
    }
    out.hypothesis = Some(text);
    out
}

/// Tagged transcription over every TPT reference (controls included).
pub fn run_tpt_eval(package: &BenchPackage, model: &dyn Backend, cfg: &EvalConfig) -> Result<TptEval, EvalError> {
    let tags = cfg.vocab.categories().iter().map(|c| format!("<{c}>")).collect::<Vec<_>>().join(", ");
    let prompt = cfg.tpt_template.render(&[("tag_vocabulary", &tags)])?;
    let refs: Vec<&TptRef> = package.all_tpt().collect();
    let items = par::map_bounded(cfg.concurrency.max(1), &refs, |r| score_tpt_item(r, model, &prompt, cfg));
    let mut sums: BTreeMap<Language, (f64, usize)> = BTreeMap::new();
    for i in &items {
        if i.score.is_none() && cfg.skip_failed {
            continue;
        }
        let e = sums.entry(i.language).or_default();
        e.0 += i.pata;
        e.1 += 1;
    }
    let mean = sums.into_iter().map(|(l, (s, n))| (l, s / n as f64)).collect();
    Ok(TptEval { items, mean })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellMetric {
    Accuracy,
    Pata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub dimension: AttributeDimension,
    pub language: Language,
    pub metric: CellMetric,
    /// In [0, 1].
    pub value: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<usize>,
}

impl Cell {
    pub fn stratum(&self) -> Stratum {
        Stratum { dimension: self.dimension, language: self.language }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<Cell>,
    pub avg: Option<f64>,
    pub avg_mode: AvgMode,
    /// Strata (e.g. "GEN/ZH") with no score.
    pub missing_cells: Vec<String>,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn get(&self, dimension: AttributeDimension, language: Language) -> Option<&Cell> {
        self.cells.iter().find(|c| c.dimension == dimension && c.language == language)
    }
}

fn all_strata() -> impl Iterator<Item = Stratum> {
    AttributeDimension::ALL
        .into_iter()
        .flat_map(|dimension| [Language::Zh, Language::En].map(|language| Stratum { dimension, language }))
}

/// Report over the 14 × 2 grid. The average covers present cells only.
pub fn aggregate_report(cells: Vec<Cell>, mode: AvgMode) -> EvalReport {
    let mut by: BTreeMap<Stratum, Cell> = BTreeMap::new();
    for c in cells {
        by.insert(c.stratum(), c);
    }
    let missing_cells = all_strata().filter(|s| !by.contains_key(s)).map(|s| s.to_string()).collect();
    let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let avg = match mode {
        AvgMode::Flat => mean(&by.values().map(|c| c.value).collect::<Vec<_>>()),
        AvgMode::PerTask => {
            let per_task: Vec<f64> = AttributeDimension::ALL
                .into_iter()
                .filter_map(|d| mean(&by.values().filter(|c| c.dimension == d).map(|c| c.value).collect::<Vec<_>>()))
                .collect();
            mean(&per_task)
        }
    };
    let note = match mode {
        AvgMode::Flat => "Avg is the unweighted mean over present (dimension, language) cells; missing cells are excluded.",
        AvgMode::PerTask => "Avg is the mean over dimensions of each dimension's ZH/EN mean; missing cells are excluded.",
    };
    EvalReport { cells: by.into_values().collect(), avg, avg_mode: mode, missing_cells, notes: vec![note.to_string()] }
}

/// Cells from MCQ tallies and TPT means.
pub fn report_cells(accuracy: &BTreeMap<Stratum, Tally>, tpt: Option<&TptEval>) -> Vec<Cell> {
    let mut cells: Vec<Cell> = accuracy
        .iter()
        .filter_map(|(s, t)| {
            Some(Cell {
                dimension: s.dimension,
                language: s.language,
                metric: CellMetric::Accuracy,
                value: t.accuracy()?,
                n: t.total,
                correct: Some(t.correct),
            })
        })
        .collect();
    if let Some(tpt) = tpt {
        for (lang, mean) in &tpt.mean {
            cells.push(Cell {
                dimension: AttributeDimension::Tpt,
                language: *lang,
                metric: CellMetric::Pata,
                value: *mean,
                n: tpt.items.iter().filter(|i| i.language == *lang).count(),
                correct: None,
            });
        }
    }
    cells
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "--".to_string(), |v| format!("{:.1}", v * 100.0))
}

/// Markdown table: one column per dimension with "ZH / EN" scores in
/// percent, then the average. Missing cells print as "--".
pub fn render_markdown(report: &EvalReport, model_name: &str) -> String {
    let mut s = String::new();
    let dims = AttributeDimension::ALL;
    let _ = write!(s, "| Model |");
    for d in dims {
        let _ = write!(s, " {} |", d.abbrev());
    }
    let _ = writeln!(s, " Avg (%) |");
    let _ = writeln!(s, "|---|{}---|", "---|".repeat(dims.len()));
    let _ = write!(s, "| {model_name} |");
    for d in dims {
        let zh = report.get(d, Language::Zh).map(|c| c.value);
        let en = report.get(d, Language::En).map(|c| c.value);
        let _ = write!(s, " {} / {} |", pct(zh), pct(en));
    }
    let _ = writeln!(s, " {} |", pct(report.avg));
    s.push('\n');
    s.push_str("Scores are reported as ZH / EN. MCQ cells are accuracy; TPT cells are mean PATA.\n");
    for n in &report.notes {
        let _ = writeln!(s, "{n}");
    }
    s
}

/// Everything one evaluation run produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRun {
    pub protocol: Protocol,
    pub answers: Vec<ModelAnswer>,
    pub tpt: TptEval,
    pub accuracy: BTreeMap<String, Tally>,
    pub report: EvalReport,
}

pub fn run_eval(
    package: &BenchPackage,
    model: &dyn Backend,
    aligner: Option<&dyn Backend>,
    cfg: &EvalConfig,
) -> Result<EvalRun, EvalError> {
    let answers = run_mcq_eval(package, model, aligner, cfg)?;
    let tally = score_accuracy(&answers, package, cfg);
    let tpt = run_tpt_eval(package, model, cfg)?;
    let report = aggregate_report(report_cells(&tally, Some(&tpt)), cfg.avg_mode);
    Ok(EvalRun {
        protocol: cfg.protocol,
        answers,
        tpt,
        accuracy: tally.into_iter().map(|(s, t)| (s.to_string(), t)).collect(),
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{AdmissionEvidence, McqOption, OptionClass};
    use crate::backend::AudioRef;
    use crate::mock::{ChoosePolicy, MockBackend, TaggedPolicy};
    use crate::schema::fixtures::record;

    #[test]
    fn tolerant_parser() {
        let opts = ["Male", "Female", "Unknown", "Other"];
        for (raw, want) in [
            ("A", Some(0)),
            ("b.", Some(1)),
            ("(C)", Some(2)),
            ("D)", Some(3)),
            ("Option B", Some(1)),
            ("Answer: (A)", Some(0)),
            ("The answer is C.", Some(2)),
            ("female", Some(1)),
            ("Female.", Some(1)),
            ("B. Female", Some(1)),
            ("A. Female", None),
            ("E", None),
            ("I think it's a man", None),
            ("", None),
        ] {
            assert_eq!(parse_option(raw, &opts), want, "{raw:?}");
        }
    }

    fn item(id: &str, dim: AttributeDimension, key: usize) -> McqItem {
        let texts = ["Male", "Female", "Unknown", "Other"];
        let options = texts
            .iter()
            .enumerate()
            .map(|(i, t)| McqOption {
                text: t.to_string(),
                klass: if i == key {
                    OptionClass::GroundTruth
                } else if i == 3 || (key == 3 && i == 2) {
                    OptionClass::SemanticTrap
                } else {
                    OptionClass::FineGrainedAcoustic
                },
            })
            .collect();
        McqItem {
            item_id: id.into(),
            dimension: dim,
            language: Language::En,
            audio: AudioRef::file(format!("{id}.wav")),
            source_utterance_id: id.into(),
            stem: "What is the gender?".into(),
            options,
            answer_index: key,
            semantic_conflict: false,
            admission: AdmissionEvidence { err: 0.0, duration_s: 4.0 },
        }
    }

    fn package(keys: &[usize]) -> BenchPackage {
        let mut pkg = BenchPackage::default();
        let s = Stratum { dimension: AttributeDimension::Gen, language: Language::En };
        pkg.items.insert(s, keys.iter().enumerate().map(|(i, &k)| item(&format!("i{i}"), s.dimension, k)).collect());
        pkg
    }

    fn key_of(pkg: &BenchPackage) -> Vec<(String, usize)> {
        pkg.all_items().map(|i| (i.item_id.clone(), i.answer_index)).collect()
    }

    #[test]
    fn key_mock_is_perfect_and_fixed_a_counts_zero_keys() {
        let pkg = package(&[0, 1, 2, 3, 0, 1, 0, 2]);
        let cfg = EvalConfig::default();
        let s = Stratum { dimension: AttributeDimension::Gen, language: Language::En };
        let key = MockBackend::new().with_answer_key(key_of(&pkg));
        let t = score_accuracy(&run_mcq_eval(&pkg, &key, None, &cfg).unwrap(), &pkg, &cfg);
        assert_eq!(t[&s], Tally { correct: 8, total: 8, skipped: 0 });
        let fixed = MockBackend::new().with_choose_policy(ChoosePolicy::Fixed("A".into()));
        let t = score_accuracy(&run_mcq_eval(&pkg, &fixed, None, &cfg).unwrap(), &pkg, &cfg);
        assert_eq!(t[&s].correct, 3);
    }

    #[test]
    fn unparseable_counts_wrong_unless_skipped() {
        let pkg = package(&[0, 1]);
        let junk = MockBackend::new().with_choose_policy(ChoosePolicy::Fixed("no idea".into()));
        let mut cfg = EvalConfig::default();
        let answers = run_mcq_eval(&pkg, &junk, None, &cfg).unwrap();
        assert!(answers.iter().all(|a| a.status == AnswerStatus::Unparseable));
        let s = Stratum { dimension: AttributeDimension::Gen, language: Language::En };
        assert_eq!(score_accuracy(&answers, &pkg, &cfg)[&s], Tally { correct: 0, total: 2, skipped: 0 });
        cfg.skip_unparseable = true;
        assert_eq!(score_accuracy(&answers, &pkg, &cfg)[&s], Tally { correct: 0, total: 0, skipped: 2 });
    }

    #[test]
    fn protocols_agree_on_cooperative_mocks() {
        let pkg = package(&[3, 1, 2, 0, 1]);
        let model = MockBackend::new().with_answer_key(key_of(&pkg));
        let direct = EvalConfig::default();
        let aligned = EvalConfig { protocol: Protocol::AlignerAssisted, ..EvalConfig::default() };
        assert!(matches!(run_mcq_eval(&pkg, &model, None, &aligned), Err(EvalError::MissingAligner)));
        let free = MockBackend::new().with_answer_key(key_of(&pkg)).with_choose_policy(ChoosePolicy::FreeText);
        let aligner = MockBackend::new();
        let a = score_accuracy(&run_mcq_eval(&pkg, &model, None, &direct).unwrap(), &pkg, &direct);
        let b = score_accuracy(&run_mcq_eval(&pkg, &free, Some(&aligner), &aligned).unwrap(), &pkg, &aligned);
        assert_eq!(a, b);
        assert_eq!(a.values().next().unwrap().correct, 5);
    }

    #[test]
    fn tpt_policies() {
        let tagged = record("u1", Language::En, "<Laughter> hello there");
        let control = record("u2", Language::En, "good morning");
        let mut pkg = BenchPackage::default();
        let refs = [&tagged, &control]
            .iter()
            .map(|r| TptRef {
                item_id: format!("tpt-en-{}", r.utterance_id),
                utterance_id: r.utterance_id.clone(),
                language: Language::En,
                audio: AudioRef::file(&r.audio_path),
                reference: r.transcript_tagged.clone(),
                control: r.paralinguistic_events.is_empty(),
                admission: AdmissionEvidence { err: 0.0, duration_s: 4.0 },
            })
            .collect();
        pkg.tpt.insert(Language::En, refs);
        let cfg = EvalConfig::default();
        let m = MockBackend::new().with_records([tagged.clone(), control.clone()]);
        let echo = run_tpt_eval(&pkg, &m, &cfg).unwrap();
        assert_eq!(echo.mean[&Language::En], 1.0);
        let strip = run_tpt_eval(&pkg, &m.clone().with_tagged_policy(TaggedPolicy::StripTags), &cfg).unwrap();
        assert_eq!(strip.items[0].pata, 0.5);
        assert_eq!(strip.items[1].pata, 1.0);
        let fab = run_tpt_eval(&pkg, &m.with_tagged_policy(TaggedPolicy::FabricateTag), &cfg).unwrap();
        assert_eq!(fab.items[1].pata, 0.5);
    }

    #[test]
    fn report_average_and_table() {
        let mut cells = Vec::new();
        let mut values = Vec::new();
        for (i, s) in all_strata().enumerate() {
            if s.dimension == AttributeDimension::Age && s.language == Language::Zh {
                continue;
            }
            let v = (i as f64 * 0.37).fract();
            values.push(v);
            cells.push(Cell { dimension: s.dimension, language: s.language, metric: CellMetric::Accuracy, value: v, n: 1, correct: None });
        }
        let r = aggregate_report(cells, AvgMode::Flat);
        assert_eq!(r.missing_cells, vec!["AGE/ZH"]);
        assert!((r.avg.unwrap() - values.iter().sum::<f64>() / 27.0).abs() < 1e-12);
        let md = render_markdown(&r, "mock");
        assert!(md.contains("| -- / "));
        assert_eq!(md.lines().next().unwrap().matches('|').count(), 17);
        assert_eq!(aggregate_report(vec![], AvgMode::Flat).avg, None);
    }
}
