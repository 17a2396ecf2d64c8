//! Training-data formulation and staged mixing.
//!
//! Three instance kinds are derived from annotation records: single-dimension
//! multiple choice (Type I), single-dimension open QA (Type II) and the full
//! structured description (Type III). Each curriculum stage mixes them at
//! fixed ratios; counts are allocated by largest remainder so they sum to
//! the requested total and each deviates from its exact share by < 1.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{AudioRef, Backend};
use crate::bench::{eligible, generate_mcq, rng_for, AdmissionEvidence, Admitted, McqConfig};
use crate::harness::option_letter;
use crate::par::{self, Execution};
use crate::prompts::{self, PromptTemplate};
use crate::schema::{AnnotationRecord, AttributeDimension, ManifestEntry};

/// Ratios are expressed in basis points (1/10000) so that they sum exactly.
pub const BP: u32 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InstanceKind {
    #[serde(rename = "TypeI_MCQ")]
    TypeI,
    #[serde(rename = "TypeII_OpenQA")]
    TypeII,
    #[serde(rename = "TypeIII_FullJson")]
    TypeIII,
}

impl InstanceKind {
    pub const ALL: [InstanceKind; 3] = [InstanceKind::TypeI, InstanceKind::TypeII, InstanceKind::TypeIII];

    pub fn name(self) -> &'static str {
        match self {
            InstanceKind::TypeI => "TypeI_MCQ",
            InstanceKind::TypeII => "TypeII_OpenQA",
            InstanceKind::TypeIII => "TypeIII_FullJson",
        }
    }

    /// Dimensions an instance of this kind may ask about.
    pub fn dimensions(self) -> Vec<AttributeDimension> {
        match self {
            InstanceKind::TypeI => AttributeDimension::mcq().collect(),
            InstanceKind::TypeII => AttributeDimension::ALL.to_vec(),
            InstanceKind::TypeIII => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceInput {
    pub prompt: String,
    pub audio: AudioRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub instance_id: String,
    pub kind: InstanceKind,
    pub input: InstanceInput,
    /// Text for Types I/II; the full record structure for Type III.
    pub target: Value,
    pub source_utterance_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimension: Option<AttributeDimension>,
    pub prompt_template_id: String,
}

#[derive(Debug, Error)]
pub enum MixError {
    #[error("Type I excludes tagged transcription")]
    TptNotMcq,
    #[error("{0} instances require a dimension")]
    MissingDimension(&'static str),
    #[error("Type III instances carry no dimension")]
    UnexpectedDimension,
    #[error("record {record} cannot serve {dimension}")]
    Ineligible { record: String, dimension: String },
    #[error("Type I instances need an MCQ generator backend")]
    MissingGenerator,
    #[error("MCQ generation for {record}: {detail}")]
    Generation { record: String, detail: String },
    #[error("stage ratios sum to {0} bp, expected 10000")]
    BadRatios(u32),
    #[error("unknown stage {0}")]
    UnknownStage(u8),
    #[error("no record can serve {0}")]
    EmptyPool(&'static str),
    #[error("{0}")]
    Io(String),
}

/// Question asked by an open-QA instance.
pub fn open_question(dim: AttributeDimension) -> &'static str {
    use AttributeDimension::*;
    match dim {
        Acc => "Describe the speaker's accent.",
        Bs => "Describe the background sound of this speech.",
        Pe => "Describe the paralinguistic events present in the speech.",
        other => crate::bench::default_stem(other),
    }
}

fn full_json_prompt(template: &PromptTemplate) -> Result<String, MixError> {
    let fields: Vec<&str> = std::iter::once("transcript")
        .chain(AttributeDimension::ALL.iter().map(|d| d.field_name()))
        .chain(std::iter::once("paralinguistic_events"))
        .collect();
    template.render(&[("fields", &fields.join(", "))]).map_err(|e| MixError::Io(e.to_string()))
}

/// Backend and settings for Type I generation.
pub struct McqSource<'a> {
    pub backend: &'a dyn Backend,
    pub config: McqConfig,
}

#[derive(Debug, Clone)]
pub struct Templates {
    pub choose: PromptTemplate,
    pub full_json: PromptTemplate,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            choose: PromptTemplate::builtin(prompts::MCQ_CHOOSE).expect("builtin"),
            full_json: PromptTemplate::builtin(prompts::FULL_JSON).expect("builtin"),
        }
    }
}

/// One training instance from one record.
pub fn formulate(
    record: &AnnotationRecord,
    kind: InstanceKind,
    dimension: Option<AttributeDimension>,
    mcq: Option<&McqSource<'_>>,
    templates: &Templates,
    instance_id: &str,
    seed: u64,
) -> Result<TrainingInstance, MixError> {
    let audio = AudioRef::file(&record.audio_path);
    let check = |dim: AttributeDimension| {
        if eligible(record, dim) && !record.dimension_text(dim).trim().is_empty() {
            Ok(())
        } else {
            Err(MixError::Ineligible { record: record.utterance_id.clone(), dimension: dim.abbrev().into() })
        }
    };
    let (prompt, target, template_id) = match kind {
        InstanceKind::TypeIII => {
            if dimension.is_some() {
                return Err(MixError::UnexpectedDimension);
            }
            (full_json_prompt(&templates.full_json)?, record.to_value(), templates.full_json.id.clone())
        }
        InstanceKind::TypeII => {
            let dim = dimension.ok_or(MixError::MissingDimension("Type II"))?;
            check(dim)?;
            (open_question(dim).to_string(), Value::String(record.dimension_text(dim)), "open_qa".to_string())
        }
        InstanceKind::TypeI => {
            let dim = dimension.ok_or(MixError::MissingDimension("Type I"))?;
            if !dim.is_mcq() {
                return Err(MixError::TptNotMcq);
            }
            check(dim)?;
            let src = mcq.ok_or(MixError::MissingGenerator)?;
            let admitted = Admitted {
                entry: ManifestEntry::new(record.clone()),
                evidence: AdmissionEvidence { err: 0.0, duration_s: record.duration_s },
            };
            let item = generate_mcq(&admitted, dim, src.backend, &src.config, seed)
                .map_err(|e| MixError::Generation { record: record.utterance_id.clone(), detail: e.to_string() })?;
            let options = item
                .option_texts()
                .iter()
                .enumerate()
                .map(|(i, o)| format!("{}. {o}", option_letter(i)))
                .collect::<Vec<_>>()
                .join("\n");
            let prompt = templates
                .choose
                .render(&[("stem", &item.stem), ("options", &options)])
                .map_err(|e| MixError::Io(e.to_string()))?;
            (prompt, Value::String(option_letter(item.answer_index).to_string()), templates.choose.id.clone())
        }
    };
    Ok(TrainingInstance {
        instance_id: instance_id.to_string(),
        kind,
        input: InstanceInput { prompt, audio },
        target,
        source_utterance_id: record.utterance_id.clone(),
        dimension,
        prompt_template_id: template_id,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMix {
    pub stage: u8,
    pub ratios_bp: BTreeMap<InstanceKind, u32>,
}

impl StageMix {
    /// Stage 1: 60/40 I/II. Stage 2: 20/40/40 I/II/III. Stage 3: all III.
    pub fn published(stage: u8) -> Result<Self, MixError> {
        use InstanceKind::*;
        let ratios: &[(InstanceKind, u32)] = match stage {
            1 => &[(TypeI, 6000), (TypeII, 4000)],
            2 => &[(TypeI, 2000), (TypeII, 4000), (TypeIII, 4000)],
            3 => &[(TypeIII, 10_000)],
            other => return Err(MixError::UnknownStage(other)),
        };
        Ok(StageMix { stage, ratios_bp: ratios.iter().copied().collect() })
    }

    pub fn validate(&self) -> Result<(), MixError> {
        let sum: u32 = self.ratios_bp.values().sum();
        if sum == BP {
            Ok(())
        } else {
            Err(MixError::BadRatios(sum))
        }
    }
}

/// Largest-remainder apportionment of `total` over `ratios_bp`. Ties in the
/// remainder go to the earlier kind.
pub fn allocate(total: usize, ratios_bp: &BTreeMap<InstanceKind, u32>) -> BTreeMap<InstanceKind, usize> {
    let total128 = total as u128;
    let mut counts: BTreeMap<InstanceKind, usize> = BTreeMap::new();
    let mut remainders: Vec<(u128, InstanceKind)> = Vec::new();
    for (&kind, &bp) in ratios_bp {
        let exact = total128 * bp as u128;
        counts.insert(kind, (exact / BP as u128) as usize);
        remainders.push((exact % BP as u128, kind));
    }
    let assigned: usize = counts.values().sum();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, kind) in remainders.into_iter().take(total.saturating_sub(assigned)) {
        *counts.get_mut(&kind).expect("present") += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: u8,
    pub mix: StageMix,
    pub instances: Vec<TrainingInstance>,
}

impl StageManifest {
    pub fn counts(&self) -> BTreeMap<InstanceKind, usize> {
        let mut out: BTreeMap<InstanceKind, usize> = self.mix.ratios_bp.keys().map(|k| (*k, 0)).collect();
        for i in &self.instances {
            *out.entry(i.kind).or_default() += 1;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct MixConfig {
    pub seed: u64,
    pub execution: Execution,
    /// In-flight generator calls for Type I.
    pub concurrency: usize,
    /// Redraw rounds for Type I slots whose generation failed.
    pub redraw_rounds: usize,
    pub templates: Templates,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self { seed: 0, execution: Execution::Parallel, concurrency: 8, redraw_rounds: 5, templates: Templates::default() }
    }
}

/// Draws `n` record indices: without replacement when `n` fits in the
/// pool, with replacement otherwise.
fn draw_records<R: Rng>(rng: &mut R, pool: usize, n: usize) -> Vec<usize> {
    if n <= pool {
        index::sample(rng, pool, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..pool)).collect()
    }
}

type Slot = (usize, Option<AttributeDimension>);

fn draw_slots<R: Rng>(
    rng: &mut R,
    pool: &[(usize, Vec<AttributeDimension>)],
    kind: InstanceKind,
    n: usize,
) -> Vec<Slot> {
    draw_records(rng, pool.len(), n)
        .into_iter()
        .map(|p| {
            let (record, dims) = &pool[p];
            let dim = (kind != InstanceKind::TypeIII).then(|| dims[rng.random_range(0..dims.len())]);
            (*record, dim)
        })
        .collect()
}

/// Materializes one stage: per-kind counts by largest remainder, records
/// drawn per kind, dimensions uniform over the record's eligible ones, and
/// a final seeded shuffle.
pub fn build_stage(
    records: &[AnnotationRecord],
    mix: &StageMix,
    total_n: usize,
    mcq: Option<&McqSource<'_>>,
    cfg: &MixConfig,
) -> Result<StageManifest, MixError> {
    mix.validate()?;
    let counts = allocate(total_n, &mix.ratios_bp);
    let mut instances = Vec::with_capacity(total_n);
    for (&kind, &n) in &counts {
        if n == 0 {
            continue;
        }
        if kind == InstanceKind::TypeI && mcq.is_none() {
            return Err(MixError::MissingGenerator);
        }
        let dims = kind.dimensions();
        let pool: Vec<(usize, Vec<AttributeDimension>)> = records
            .iter()
            .enumerate()
            .filter_map(|(i, r)| {
                if kind == InstanceKind::TypeIII {
                    return Some((i, Vec::new()));
                }
                let ok: Vec<AttributeDimension> = dims.iter().copied().filter(|d| eligible(r, *d)).collect();
                (!ok.is_empty()).then_some((i, ok))
            })
            .collect();
        if pool.is_empty() {
            return Err(MixError::EmptyPool(kind.name()));
        }
        let label = format!("stage{}/{}", mix.stage, kind.name());
        let mut rng = rng_for(cfg.seed, &label);
        let slots = draw_slots(&mut rng, &pool, kind, n);
        let id = |k: usize| format!("s{}-{}-{k:07}", mix.stage, kind.name().to_lowercase());
        let seed_of = |k: usize| crate::bench::derive_seed(cfg.seed, &format!("{label}/{k}"));
        let make = |(k, (r, d)): &(usize, Slot)| {
            formulate(&records[*r], kind, *d, mcq, &cfg.templates, &id(*k), seed_of(*k))
        };
        let mut pending: Vec<(usize, Slot)> = slots.into_iter().enumerate().collect();
        let mut done: BTreeMap<usize, TrainingInstance> = BTreeMap::new();
        for round in 0..=cfg.redraw_rounds {
            let results = if kind == InstanceKind::TypeI {
                par::map_bounded(cfg.concurrency.max(1), &pending, make)
            } else {
                par::map(cfg.execution, &pending, make)
            };
            let mut failed = Vec::new();
            let mut last_err = None;
            for ((k, _), res) in pending.iter().zip(results) {
                match res {
                    Ok(inst) => {
                        done.insert(*k, inst);
                    }
                    Err(e @ MixError::Generation { .. }) => {
                        failed.push(*k);
                        last_err = Some(e);
                    }
                    Err(e) => return Err(e),
                }
            }
            if failed.is_empty() {
                break;
            }
            if round == cfg.redraw_rounds {
                return Err(last_err.expect("a failure was recorded"));
            }
            tracing::warn!(stage = mix.stage, kind = kind.name(), failed = failed.len(), round, "redrawing failed slots");
            let mut rng = rng_for(cfg.seed, &format!("{label}/redraw/{round}"));
            pending = failed
                .into_iter()
                .map(|k| {
                    let slot = draw_slots(&mut rng, &pool, kind, 1).remove(0);
                    (k, slot)
                })
                .collect();
        }
        instances.extend(done.into_values());
    }
    instances.shuffle(&mut rng_for(cfg.seed, &format!("stage{}/shuffle", mix.stage)));
    Ok(StageManifest { stage: mix.stage, mix: mix.clone(), instances })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: u8,
    pub file: String,
    pub total: usize,
    pub counts: BTreeMap<InstanceKind, usize>,
    pub target_ratios: BTreeMap<InstanceKind, f64>,
    pub realized_ratios: BTreeMap<InstanceKind, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSummary {
    pub seed: u64,
    pub stages: Vec<StageSummary>,
}

pub fn stage_file_name(stage: u8) -> String {
    format!("stage{stage}.jsonl")
}

pub fn render_stage(stage: &StageManifest) -> String {
    let mut out = String::new();
    for i in &stage.instances {
        out.push_str(&serde_json::to_string(i).expect("serializes"));
        out.push('\n');
    }
    out
}

pub fn summarize(stage: &StageManifest, file: &str) -> StageSummary {
    let counts = stage.counts();
    let total = stage.instances.len();
    StageSummary {
        stage: stage.stage,
        file: file.to_string(),
        total,
        target_ratios: stage.mix.ratios_bp.iter().map(|(k, bp)| (*k, *bp as f64 / BP as f64)).collect(),
        realized_ratios: counts.iter().map(|(k, c)| (*k, if total == 0 { 0.0 } else { *c as f64 / total as f64 })).collect(),
        counts,
    }
}

/// One `stage{n}.jsonl` per stage plus `summary.json`.
pub fn emit_manifests(stages: &[StageManifest], seed: u64, out_dir: impl AsRef<Path>) -> Result<MixSummary, MixError> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| MixError::Io(format!("{}: {e}", dir.display())))?;
    let mut summary = MixSummary { seed, stages: Vec::new() };
    for s in stages {
        let name = stage_file_name(s.stage);
        let path = dir.join(&name);
        std::fs::write(&path, render_stage(s)).map_err(|e| MixError::Io(format!("{}: {e}", path.display())))?;
        summary.stages.push(summarize(s, &name));
    }
    let text = serde_json::to_string_pretty(&summary).expect("serializes");
    std::fs::write(dir.join("summary.json"), text + "\n").map_err(|e| MixError::Io(e.to_string()))?;
    Ok(summary)
}

/// A full curriculum: `{"seed": 7, "stages": [{"stage": 1, "n": 15000}, ...]}`.
/// A stage may override its ratios with `"ratios_bp": {"TypeI_MCQ": 5000, ...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixPlan {
    pub seed: u64,
    pub stages: Vec<PlannedStage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedStage {
    pub stage: u8,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratios_bp: Option<BTreeMap<InstanceKind, u32>>,
}

impl MixPlan {
    pub fn published(n: [usize; 3], seed: u64) -> Self {
        MixPlan {
            seed,
            stages: (1..=3).zip(n).map(|(stage, n)| PlannedStage { stage, n, ratios_bp: None }).collect(),
        }
    }

    pub fn mixes(&self) -> Result<Vec<(StageMix, usize)>, MixError> {
        self.stages
            .iter()
            .map(|p| {
                let mix = match &p.ratios_bp {
                    Some(r) => StageMix { stage: p.stage, ratios_bp: r.clone() },
                    None => StageMix::published(p.stage)?,
                };
                mix.validate()?;
                Ok((mix, p.n))
            })
            .collect()
    }
}

pub fn run_plan(
    records: &[AnnotationRecord],
    plan: &MixPlan,
    mcq: Option<&McqSource<'_>>,
    cfg: &MixConfig,
) -> Result<Vec<StageManifest>, MixError> {
    let cfg = MixConfig { seed: plan.seed, ..cfg.clone() };
    plan.mixes()?.iter().map(|(mix, n)| build_stage(records, mix, *n, mcq, &cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mock::MockBackend;
    use crate::schema::fixtures::record;
    use crate::schema::{validate_value, Language, TagVocabulary};
    use InstanceKind::*;

    fn records(n: usize) -> Vec<AnnotationRecord> {
        (0..n)
            .map(|i| {
                let tagged = if i % 2 == 0 { "<Laughter> hello there" } else { "hello there" };
                record(&format!("r{i:03}"), if i % 3 == 0 { Language::Zh } else { Language::En }, tagged)
            })
            .map(|mut r| {
                if r.language == Language::Zh {
                    r.transcript_tagged = r.transcript_tagged.replace("hello there", "你好");
                    r.transcript = "你好".into();
                }
                r
            })
            .collect()
    }

    #[test]
    fn allocation_is_exact_and_within_one() {
        let m = |s| StageMix::published(s).unwrap();
        assert_eq!(allocate(15_000_000, &m(1).ratios_bp), [(TypeI, 9_000_000), (TypeII, 6_000_000)].into());
        assert_eq!(allocate(1000, &m(2).ratios_bp), [(TypeI, 200), (TypeII, 400), (TypeIII, 400)].into());
        assert_eq!(allocate(7, &m(3).ratios_bp), [(TypeIII, 7)].into());
        for total in 0..500usize {
            for s in 1..=3 {
                let mix = m(s);
                let c = allocate(total, &mix.ratios_bp);
                assert_eq!(c.values().sum::<usize>(), total);
                for (k, bp) in &mix.ratios_bp {
                    let exact = total as f64 * *bp as f64 / BP as f64;
                    assert!((c[k] as f64 - exact).abs() < 1.0);
                }
            }
        }
        assert!(matches!(StageMix { stage: 9, ratios_bp: [(TypeI, 5000)].into() }.validate(), Err(MixError::BadRatios(5000))));
    }

    #[test]
    fn formulation_rules() {
        let r = record("u1", Language::En, "<Sighing> hello there");
        let t = Templates::default();
        let iii = formulate(&r, TypeIII, None, None, &t, "x", 0).unwrap();
        assert_eq!(validate_value(&iii.target, &TagVocabulary::default()).unwrap(), r);
        let ii = formulate(&r, TypeII, Some(AttributeDimension::Rhy), None, &t, "x", 0).unwrap();
        assert_eq!(ii.input.prompt, "Analyze the rhythmic features of the speaker's speech.");
        assert_eq!(ii.target, Value::String(r.rhythm.clone()));
        let mock = MockBackend::new();
        let src = McqSource { backend: &mock, config: McqConfig::default() };
        assert!(matches!(formulate(&r, TypeI, Some(AttributeDimension::Tpt), Some(&src), &t, "x", 0), Err(MixError::TptNotMcq)));
        assert!(matches!(formulate(&r, TypeI, Some(AttributeDimension::Gen), None, &t, "x", 0), Err(MixError::MissingGenerator)));
        let i = formulate(&r, TypeI, Some(AttributeDimension::Gen), Some(&src), &t, "x", 3).unwrap();
        let letter = i.target.as_str().unwrap().chars().next().unwrap();
        let line = i.input.prompt.lines().find(|l| l.starts_with(&format!("{letter}. "))).unwrap();
        assert_eq!(line, format!("{letter}. Male"));
        let plain = record("u2", Language::En, "hello there");
        assert!(matches!(
            formulate(&plain, TypeII, Some(AttributeDimension::Pe), None, &t, "x", 0),
            Err(MixError::Ineligible { .. })
        ));
    }

    #[test]
    fn stages_are_exact_deterministic_and_reuse_when_needed() {
        let recs = records(12);
        let mock = MockBackend::new();
        let src = McqSource { backend: &mock, config: McqConfig::default() };
        let cfg = MixConfig { seed: 11, ..MixConfig::default() };
        let s2 = build_stage(&recs, &StageMix::published(2).unwrap(), 50, Some(&src), &cfg).unwrap();
        assert_eq!(s2.counts(), [(TypeI, 10), (TypeII, 20), (TypeIII, 20)].into());
        let again = build_stage(&recs, &StageMix::published(2).unwrap(), 50, Some(&src), &cfg).unwrap();
        assert_eq!(render_stage(&s2), render_stage(&again));
        let seq = MixConfig { execution: Execution::Sequential, ..cfg.clone() };
        assert_eq!(render_stage(&s2), render_stage(&build_stage(&recs, &StageMix::published(2).unwrap(), 50, Some(&src), &seq).unwrap()));
        for i in &s2.instances {
            let src = recs.iter().find(|r| r.utterance_id == i.source_utterance_id).unwrap();
            if let Some(d) = i.dimension {
                assert!(eligible(src, d));
                assert!(i.kind != TypeI || d.is_mcq());
            }
        }
        // 20 Type III from 12 records: with replacement; 10 fits without.
        let s3 = build_stage(&recs, &StageMix::published(3).unwrap(), 10, None, &cfg).unwrap();
        let mut ids: Vec<_> = s3.instances.iter().map(|i| &i.source_utterance_id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 10);
        assert!(matches!(build_stage(&recs, &StageMix::published(1).unwrap(), 10, None, &cfg), Err(MixError::MissingGenerator)));
    }

    #[test]
    fn emits_files_and_summary() {
        let recs = records(6);
        let mock = MockBackend::new();
        let src = McqSource { backend: &mock, config: McqConfig::default() };
        let plan = MixPlan::published([20, 10, 7], 5);
        let stages = run_plan(&recs, &plan, Some(&src), &MixConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let summary = emit_manifests(&stages, plan.seed, dir.path()).unwrap();
        for n in 1..=3 {
            assert!(dir.path().join(stage_file_name(n)).exists());
        }
        assert_eq!(summary.stages[0].counts, [(TypeI, 12), (TypeII, 8)].into());
        assert_eq!(summary.stages[2].counts, [(TypeIII, 7)].into());
        let back: MixPlan = serde_json::from_str(&serde_json::to_string(&plan).unwrap()).unwrap();
        assert_eq!(back, plan);
    }
}
