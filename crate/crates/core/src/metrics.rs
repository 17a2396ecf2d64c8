//! Tokenization, Levenshtein alignment, WER/CER and the PATA composite.
//!
//! Text and paralinguistic tags share one token stream ("uniform tokens").
//! Text error is computed on the text tokens alone; tag scoring aligns the
//! full stream so that a tag only counts as a true positive when the
//! alignment pairs it with an identical reference tag.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::schema::{Language, TagVocabulary};

/// Default weight of the text component in PATA.
pub const DEFAULT_ALPHA: f64 = 0.5;

/// One element of the uniform token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value")]
pub enum UniformToken {
    /// A word (EN) or a single character (ZH), normalized.
    Text(String),
    /// A canonical tag category.
    Tag(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Text,
    Tag,
}

impl UniformToken {
    pub fn kind(&self) -> TokenKind {
        match self {
            UniformToken::Text(_) => TokenKind::Text,
            UniformToken::Tag(_) => TokenKind::Tag,
        }
    }

    pub fn value(&self) -> &str {
        match self {
            UniformToken::Text(v) | UniformToken::Tag(v) => v,
        }
    }

    pub fn is_tag(&self) -> bool {
        matches!(self, UniformToken::Tag(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenizeError {
    #[error("malformed tag at byte {position}: {detail}")]
    MalformedTag { position: usize, detail: String },
    #[error("unknown tag `{0}`")]
    UnknownTag(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error("alpha must lie in [0, 1], got {0}")]
    InvalidAlpha(f64),
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum TagMode {
    Strict,
    Lenient,
}

/// Tokenizes a tagged transcript. Tags are `<Name>` spans; their names are
/// canonicalized against `vocab` and unknown names are rejected.
pub fn tokenize(
    text: &str,
    language: Language,
    vocab: &TagVocabulary,
) -> Result<Vec<UniformToken>, TokenizeError> {
    scan(text, language, vocab, TagMode::Strict)
}

/// Tokenizer for model output: unknown tag names are kept verbatim (they can
/// never match a canonical reference tag) and stray brackets act as
/// separators instead of failing.
pub fn tokenize_lenient(text: &str, language: Language, vocab: &TagVocabulary) -> Vec<UniformToken> {
    scan(text, language, vocab, TagMode::Lenient).expect("lenient scan is infallible")
}

fn scan(
    text: &str,
    language: Language,
    vocab: &TagVocabulary,
    mode: TagMode,
) -> Result<Vec<UniformToken>, TokenizeError> {
    let text: String = text.nfc().collect();
    let mut tokens = Vec::new();
    let mut buf = String::new();
    let mut i = 0;
    while i < text.len() {
        let c = text[i..].chars().next().unwrap();
        match c {
            '<' => {
                let rest = &text[i + 1..];
                let close = rest.find(['<', '>']);
                let name = match close {
                    Some(k) if rest.as_bytes()[k] == b'>' => Some((rest[..k].trim(), k)),
                    _ => None,
                };
                match name {
                    Some((name, k)) if !name.is_empty() => {
                        push_text(&buf, language, &mut tokens);
                        buf.clear();
                        let category = match vocab.canonicalize(name) {
                            Ok(canon) => canon.to_string(),
                            Err(_) if mode == TagMode::Lenient => name.to_string(),
                            Err(_) => return Err(TokenizeError::UnknownTag(name.to_string())),
                        };
                        tokens.push(UniformToken::Tag(category));
                        i += 1 + k + 1;
                        continue;
                    }
                    _ if mode == TagMode::Strict => {
                        let detail = match close {
                            None => "unclosed `<`",
                            Some(k) if rest.as_bytes()[k] == b'<' => "nested `<`",
                            Some(_) => "empty tag name",
                        };
                        return Err(TokenizeError::MalformedTag {
                            position: i,
                            detail: detail.to_string(),
                        });
                    }
                    _ => buf.push(' '),
                }
            }
            '>' => {
                if mode == TagMode::Strict {
                    return Err(TokenizeError::MalformedTag {
                        position: i,
                        detail: "stray `>`".to_string(),
                    });
                }
                buf.push(' ');
            }
            _ => buf.push(c),
        }
        i += c.len_utf8();
    }
    push_text(&buf, language, &mut tokens);
    Ok(tokens)
}

fn push_text(segment: &str, language: Language, out: &mut Vec<UniformToken>) {
    match language {
        Language::En => {
            for piece in segment.split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '\u{2019}')) {
                let word = piece.trim_matches(|c| c == '\'' || c == '\u{2019}');
                if !word.is_empty() {
                    out.push(UniformToken::Text(word.to_lowercase()));
                }
            }
        }
        Language::Zh => {
            for c in segment.chars().filter(|c| c.is_alphanumeric()) {
                out.push(UniformToken::Text(c.to_lowercase().collect()));
            }
        }
    }
}

/// Text tokens only, in order.
pub fn text_tokens(tokens: &[UniformToken]) -> Vec<&str> {
    tokens
        .iter()
        .filter_map(|t| match t {
            UniformToken::Text(v) => Some(v.as_str()),
            UniformToken::Tag(_) => None,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditOp {
    Match,
    Substitute,
    Delete,
    Insert,
}

/// One step of an edit script. `ref_index` is absent for inserts,
/// `hyp_index` for deletes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedPair {
    pub op: EditOp,
    pub ref_index: Option<usize>,
    pub hyp_index: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub steps: Vec<AlignedPair>,
}

impl Alignment {
    /// Number of non-match steps.
    pub fn cost(&self) -> usize {
        self.steps.iter().filter(|s| s.op != EditOp::Match).count()
    }

    /// Rebuilds the hypothesis by running the script over `reference`.
    pub fn apply<T: Clone>(&self, reference: &[T], hypothesis: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(hypothesis.len());
        for step in &self.steps {
            match step.op {
                EditOp::Match => out.push(reference[step.ref_index.unwrap()].clone()),
                EditOp::Substitute | EditOp::Insert => {
                    out.push(hypothesis[step.hyp_index.unwrap()].clone())
                }
                EditOp::Delete => {}
            }
        }
        out
    }

    pub fn count(&self, op: EditOp) -> usize {
        self.steps.iter().filter(|s| s.op == op).count()
    }
}

/// Unit-cost Levenshtein distance with a deterministic backtrace.
///
/// Walking back from the bottom-right cell, ties are broken with precedence
/// Match > Substitute > Delete > Insert.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> (usize, Alignment) {
    let n = reference.len();
    let m = hypothesis.len();
    let width = m + 1;
    let mut table = vec![0usize; (n + 1) * width];
    for j in 0..=m {
        table[j] = j;
    }
    for i in 1..=n {
        table[i * width] = i;
        for j in 1..=m {
            let diag = table[(i - 1) * width + j - 1]
                + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let up = table[(i - 1) * width + j] + 1;
            let left = table[i * width + j - 1] + 1;
            table[i * width + j] = diag.min(up).min(left);
        }
    }

    let mut steps = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = table[i * width + j];
        if i > 0 && j > 0 {
            let diag = table[(i - 1) * width + j - 1];
            let same = reference[i - 1] == hypothesis[j - 1];
            if same && diag == here {
                steps.push(AlignedPair { op: EditOp::Match, ref_index: Some(i - 1), hyp_index: Some(j - 1) });
                i -= 1;
                j -= 1;
                continue;
            }
            if !same && diag + 1 == here {
                steps.push(AlignedPair { op: EditOp::Substitute, ref_index: Some(i - 1), hyp_index: Some(j - 1) });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && table[(i - 1) * width + j] + 1 == here {
            steps.push(AlignedPair { op: EditOp::Delete, ref_index: Some(i - 1), hyp_index: None });
            i -= 1;
        } else {
            steps.push(AlignedPair { op: EditOp::Insert, ref_index: None, hyp_index: Some(j - 1) });
            j -= 1;
        }
    }
    steps.reverse();
    (table[n * width + m], Alignment { steps })
}

/// Distance only, two-row memory.
pub fn levenshtein<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut curr = vec![0usize; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        curr[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            curr[j + 1] = sub.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[hypothesis.len()]
}

/// Edit distance over `|reference|`, with the denominator clamped to 1.
/// Can exceed 1.
pub fn error_rate<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> f64 {
    levenshtein(reference, hypothesis) as f64 / reference.len().max(1) as f64
}

/// WER (EN) or CER (ZH) after removing all tags. The reference must be
/// well-formed; the hypothesis is tokenized leniently.
pub fn compute_err(
    reference: &str,
    hypothesis: &str,
    language: Language,
    vocab: &TagVocabulary,
) -> Result<f64, TokenizeError> {
    let r = tokenize(reference, language, vocab)?;
    let h = tokenize_lenient(hypothesis, language, vocab);
    Ok(error_rate(&text_tokens(&r), &text_tokens(&h)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TagScore {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub f1: f64,
}

impl TagScore {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let f1 = if tp + fp + fn_ == 0 {
            1.0
        } else {
            (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
        };
        Self { tp, fp, fn_, f1 }
    }
}

/// Tag precision/recall over the full uniform alignment. A hypothesis tag is
/// a true positive iff the alignment matches it to a reference tag (same
/// category by construction). When neither side has tags, F1 is 1.
pub fn score_tags(reference: &[UniformToken], hypothesis: &[UniformToken]) -> TagScore {
    let (_, alignment) = edit_distance(reference, hypothesis);
    let tp = alignment
        .steps
        .iter()
        .filter(|s| s.op == EditOp::Match && reference[s.ref_index.unwrap()].is_tag())
        .count();
    let ref_tags = reference.iter().filter(|t| t.is_tag()).count();
    let hyp_tags = hypothesis.iter().filter(|t| t.is_tag()).count();
    TagScore::from_counts(tp, hyp_tags - tp, ref_tags - tp)
}

/// Decomposed PATA score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PataScore {
    pub err_text: f64,
    /// `max(0, 1 - err_text)`
    pub text_component: f64,
    pub tag_tp: usize,
    pub tag_fp: usize,
    pub tag_fn: usize,
    pub f1_para: f64,
    pub alpha: f64,
    pub pata: f64,
}

impl PataScore {
    pub fn assemble(err_text: f64, tags: TagScore, alpha: f64) -> Self {
        let text_component = (1.0 - err_text).max(0.0);
        Self {
            err_text,
            text_component,
            tag_tp: tags.tp,
            tag_fp: tags.fp,
            tag_fn: tags.fn_,
            f1_para: tags.f1,
            alpha,
            pata: alpha * text_component + (1.0 - alpha) * tags.f1,
        }
    }
}

/// PATA from already tokenized sequences.
pub fn pata_from_tokens(reference: &[UniformToken], hypothesis: &[UniformToken], alpha: f64) -> PataScore {
    let err = error_rate(&text_tokens(reference), &text_tokens(hypothesis));
    PataScore::assemble(err, score_tags(reference, hypothesis), alpha)
}

pub fn compute_pata(
    reference_tagged: &str,
    hypothesis_tagged: &str,
    language: Language,
    alpha: f64,
    vocab: &TagVocabulary,
) -> Result<PataScore, MetricError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(MetricError::InvalidAlpha(alpha));
    }
    let r = tokenize(reference_tagged, language, vocab)?;
    let h = tokenize_lenient(hypothesis_tagged, language, vocab);
    Ok(pata_from_tokens(&r, &h, alpha))
}

/// Corpus value as the mean of per-utterance scores; `None` when empty.
pub fn mean_pata(scores: &[PataScore]) -> Option<f64> {
    if scores.is_empty() {
        None
    } else {
        Some(scores.iter().map(|s| s.pata).sum::<f64>() / scores.len() as f64)
    }
}
