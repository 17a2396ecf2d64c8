//! Versioned prompt templates.
//!
//! Templates are plain text with `{name}` placeholders. Built-in templates
//! ship with the crate; any of them can be replaced by a file at run time
//! without recompiling.

use std::path::Path;

use regex::Regex;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("template {template} has unresolved placeholder {{{name}}}")]
    Unresolved { template: String, name: String },
    #[error("unknown built-in template {0}")]
    Unknown(String),
    #[error("cannot read template file {path}: {detail}")]
    Io { path: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    /// `name.vN`, recorded alongside every model output it produced.
    pub id: String,
    pub text: String,
}

pub const STAGE1_MACRO: &str = "stage1_macro.v1";
pub const STAGE2_MICRO: &str = "stage2_micro.v1";
pub const INGEST: &str = "ingest.v1";
pub const MCQ_GENERATE: &str = "mcq_generate.v1";
pub const MCQ_CHOOSE: &str = "mcq_choose.v1";
pub const TPT_TRANSCRIBE: &str = "tpt_transcribe.v1";
pub const FULL_JSON: &str = "full_json.v1";

const BUILTIN: [(&str, &str); 7] = [
    (STAGE1_MACRO, include_str!("../assets/prompts/stage1_macro.v1.txt")),
    (STAGE2_MICRO, include_str!("../assets/prompts/stage2_micro.v1.txt")),
    (INGEST, include_str!("../assets/prompts/ingest.v1.txt")),
    (MCQ_GENERATE, include_str!("../assets/prompts/mcq_generate.v1.txt")),
    (MCQ_CHOOSE, include_str!("../assets/prompts/mcq_choose.v1.txt")),
    (TPT_TRANSCRIBE, include_str!("../assets/prompts/tpt_transcribe.v1.txt")),
    (FULL_JSON, include_str!("../assets/prompts/full_json.v1.txt")),
];

fn placeholder_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").expect("valid regex"))
}

impl PromptTemplate {
    pub fn builtin(id: &str) -> Result<Self, PromptError> {
        BUILTIN
            .iter()
            .find(|(k, _)| *k == id)
            .map(|(k, t)| Self { id: k.to_string(), text: t.to_string() })
            .ok_or_else(|| PromptError::Unknown(id.to_string()))
    }

    pub fn builtin_ids() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|(k, _)| *k)
    }

    /// Loads a replacement template; the id is the file stem (`name.vN`).
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| PromptError::Io { path: path.display().to_string(), detail: e.to_string() })?;
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Self { id, text })
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in placeholder_re().captures_iter(&self.text) {
            let n = c[1].to_string();
            if !out.contains(&n) {
                out.push(n);
            }
        }
        out
    }

    /// Substitutes every placeholder; an unfilled placeholder is an error.
    pub fn render(&self, vars: &[(&str, &str)]) -> Result<String, PromptError> {
        let mut missing = None;
        let out = placeholder_re().replace_all(&self.text, |c: &regex::Captures| {
            let name = &c[1];
            match vars.iter().find(|(k, _)| *k == name) {
                Some((_, v)) => v.to_string(),
                None => {
                    missing.get_or_insert_with(|| name.to_string());
                    String::new()
                }
            }
        });
        match missing {
            Some(name) => Err(PromptError::Unresolved { template: self.id.clone(), name }),
            None => Ok(out.into_owned()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_builtins_load_and_have_placeholders() {
        for id in PromptTemplate::builtin_ids() {
            let t = PromptTemplate::builtin(id).unwrap();
            assert!(!t.text.trim().is_empty(), "{id}");
        }
        let t = PromptTemplate::builtin(STAGE1_MACRO).unwrap();
        assert_eq!(t.placeholders(), vec!["tag_vocabulary", "priors"]);
        assert_eq!(PromptTemplate::builtin(STAGE2_MICRO).unwrap().placeholders(), vec!["tag_vocabulary", "macro_context"]);
    }

    #[test]
    fn render_requires_every_placeholder() {
        let t = PromptTemplate { id: "t.v1".into(), text: "a {x} b {y} {\"json\": 1}".into() };
        assert_eq!(t.render(&[("x", "1"), ("y", "2")]).unwrap(), "a 1 b 2 {\"json\": 1}");
        assert_eq!(
            t.render(&[("x", "1")]).unwrap_err(),
            PromptError::Unresolved { template: "t.v1".into(), name: "y".into() }
        );
    }

    #[test]
    fn file_override() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stage1_macro.v2.txt");
        std::fs::write(&p, "new {priors}").unwrap();
        let t = PromptTemplate::from_file(&p).unwrap();
        assert_eq!(t.id, "stage1_macro.v2");
        assert_eq!(t.render(&[("priors", "[]")]).unwrap(), "new []");
    }
}
