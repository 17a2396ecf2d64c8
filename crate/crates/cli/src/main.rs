//! `speechgrain` command-line interface.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::{json, Value};

use speechgrain_core::annotate::{chunk_jobs, parse_jobs, run_pipeline, AnnotationStore, AnnotatorConfig, Job, PipelineMode};
use speechgrain_core::backend::{AudioMode, Backend, RetryPolicy};
use speechgrain_core::bench::{self, build_package, export_package, import_package, BuildConfig, Targets};
use speechgrain_core::chunker::{ChunkerConfig, Detector, SafeChunker, TimedUtterance};
use speechgrain_core::crossval::{parse_filter_list, run_cascade, CascadeConfig};
use speechgrain_core::harness::{render_markdown, run_eval, AvgMode, EvalConfig, Protocol};
use speechgrain_core::metrics::{compute_pata, PataScore, DEFAULT_ALPHA};
use speechgrain_core::mixer::{self, build_stage, emit_manifests, run_plan, McqSource, MixConfig, MixPlan, StageMix};
use speechgrain_core::mock::{ChoosePolicy, MockBackend, TaggedPolicy};
use speechgrain_core::review::ReviewQueue;
use speechgrain_core::schema::{read_manifest, render_manifest, write_manifest, AnnotationRecord, Language, ManifestEntry, TagVocabulary};
use speechgrain_core::wav;
use speechgrain_http::{mock_router, review_router, BackendMap, HttpBackend, ReviewService};

#[derive(Parser)]
#[command(name = "speechgrain", version, about = "Speech-attribute corpus curation, benchmark construction and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan silence-aligned chunk boundaries for long recordings.
    Chunk(ChunkArgs),
    /// Run the annotation pipeline against a backend.
    Annotate(AnnotateArgs),
    /// Cross-validate annotations against expert backends.
    Validate(ValidateArgs),
    /// Score tagged transcriptions with PATA.
    ScoreTpt(ScoreTptArgs),
    /// Build a benchmark package from validated records.
    BuildBench(BuildBenchArgs),
    /// Human review service.
    Review {
        #[command(subcommand)]
        command: ReviewCommand,
    },
    /// Evaluate a model over a benchmark package.
    Eval(EvalArgs),
    /// Materialize curriculum training manifests.
    Mix(MixArgs),
    /// Serve the deterministic mock backend over HTTP.
    MockBackend(MockArgs),
}

#[derive(Args)]
struct ChunkArgs {
    /// JSONL: {"recording_id", "audio_path", "language", "duration_s"?}.
    /// Without duration_s the WAV header is read.
    #[arg(long)]
    audio_manifest: PathBuf,
    /// JSONL: {"recording_id", "start_s", "end_s", "text"?, "speaker_id"?}.
    #[arg(long)]
    timestamps_a: PathBuf,
    /// Same format as --timestamps-a; these segments become the priors.
    #[arg(long)]
    timestamps_b: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "300:360")]
    window: String,
    #[arg(long, default_value_t = 0.2)]
    min_silence: f64,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum AnnotateStage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Ingest,
    Full,
}

#[derive(Args)]
struct AnnotateArgs {
    #[arg(long, value_enum)]
    stage: AnnotateStage,
    /// Job manifest (chunk and/or ingest lines).
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    backend: String,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    /// Store directory; finished work there is reused on re-runs.
    #[arg(long, default_value = "annotations")]
    out: PathBuf,
    #[arg(long, default_value = "reference")]
    audio_mode: String,
    #[arg(long, default_value_t = 3)]
    retries: u32,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Survivor manifest.
    #[arg(long)]
    out: PathBuf,
    /// Statistics JSON.
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value = "wer,emotion,intensity,demographics,para")]
    filters: String,
    /// JSON: {"default": url, "<filter>": url, ...}.
    #[arg(long)]
    backend_map: PathBuf,
    #[arg(long, default_value_t = speechgrain_core::crossval::DEFAULT_MAX_ERR)]
    max_err: f64,
    #[arg(long, default_value_t = 8)]
    concurrency: usize,
    /// Let records with unknown pitch/rate levels pass the intensity filter.
    #[arg(long)]
    intensity_fail_open: bool,
}

#[derive(Args)]
struct ScoreTptArgs {
    /// JSONL with "utterance_id" and "transcript_tagged" (or "text").
    #[arg(long)]
    refs: PathBuf,
    /// JSONL with "utterance_id" and "text".
    #[arg(long)]
    hyps: PathBuf,
    #[arg(long)]
    lang: Language,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
}

#[derive(Args)]
struct BuildBenchArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Targets JSON ({"GEN": {"ZH": 932, ...}}), `published`, or `uniform:N`.
    #[arg(long)]
    targets: String,
    #[arg(long)]
    backend: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = bench::DEFAULT_CONTROL_FRACTION)]
    control_fraction: f64,
    #[arg(long, default_value_t = bench::DEFAULT_N_OPTIONS)]
    n_options: usize,
    #[arg(long, default_value_t = 8)]
    concurrency: usize,
}

#[derive(Subcommand)]
enum ReviewCommand {
    /// Serve the review API over a queue.
    Serve {
        /// Records to enqueue (already-queued ids are skipped).
        #[arg(long)]
        queue: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Event log; defaults to `<queue>.review-log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Base directory for relative audio paths.
        #[arg(long, default_value = ".")]
        audio_root: PathBuf,
    },
    /// Write the retained records of a review log as a manifest.
    Export {
        #[arg(long)]
        log: PathBuf,
        /// Output manifest; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    bench: PathBuf,
    #[arg(long)]
    model: String,
    #[arg(long, default_value = "direct")]
    protocol: Protocol,
    #[arg(long)]
    aligner: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long, default_value = "flat")]
    avg_mode: AvgMode,
    #[arg(long)]
    skip_unparseable: bool,
    #[arg(long)]
    skip_failed: bool,
    #[arg(long, default_value = "model")]
    model_name: String,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    #[arg(long, default_value = "reference")]
    audio_mode: String,
}

#[derive(Args)]
#[command(args_conflicts_with_subcommands = true, subcommand_negates_reqs = true)]
struct MixArgs {
    #[command(subcommand)]
    all: Option<MixCommand>,
    #[arg(long, required = true)]
    manifest: Option<PathBuf>,
    #[arg(long, required = true)]
    stage: Option<u8>,
    #[arg(long, required = true)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, required = true)]
    out: Option<PathBuf>,
    /// MCQ generator backend, needed when the stage has Type I instances.
    #[arg(long)]
    backend: Option<String>,
}

#[derive(Subcommand)]
enum MixCommand {
    /// Materialize every stage of a plan into a directory.
    All {
        /// JSON: {"seed": S, "stages": [{"stage": 1, "n": N}, ...]}.
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        backend: Option<String>,
    },
}

#[derive(Args)]
struct MockArgs {
    /// 0 picks a free port; the bound address is printed on stdout.
    #[arg(long, default_value_t = 8000)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Ground-truth records for the expert and model endpoints.
    #[arg(long)]
    records: Vec<PathBuf>,
    /// Benchmark package whose answer key `/v1/choose` uses.
    #[arg(long)]
    bench: Option<PathBuf>,
    /// `key`, `free-text`, or `fixed:<text>`.
    #[arg(long, default_value = "key")]
    choose: String,
    /// `echo`, `strip`, or `fabricate`.
    #[arg(long, default_value = "echo")]
    tagged: String,
}

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Chunk(a) => chunk(a),
        Command::Annotate(a) => annotate(a),
        Command::Validate(a) => validate(a),
        Command::ScoreTpt(a) => score_tpt(a),
        Command::BuildBench(a) => build_bench(a),
        Command::Review { command } => review(command),
        Command::Eval(a) => eval(a),
        Command::Mix(a) => mix(a),
        Command::MockBackend(a) => mock_backend(a),
    }
}

fn vocab() -> TagVocabulary {
    TagVocabulary::default()
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn records_of(path: &Path) -> Result<Vec<ManifestEntry>> {
    read_manifest(path, &vocab()).with_context(|| format!("reading manifest {}", path.display()))
}

fn audio_mode(s: &str) -> Result<AudioMode> {
    match s {
        "reference" => Ok(AudioMode::Reference),
        "base64" => Ok(AudioMode::Base64),
        other => bail!("unknown audio mode `{other}` (expected reference|base64)"),
    }
}

fn http(url: &str) -> Result<HttpBackend> {
    HttpBackend::new(url).map_err(|e| anyhow!("{e}"))
}

// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct AudioLine {
    recording_id: String,
    audio_path: String,
    language: Language,
    duration_s: Option<f64>,
}

#[derive(Deserialize)]
struct StampLine {
    recording_id: String,
    start_s: f64,
    end_s: f64,
    text: Option<String>,
    speaker_id: Option<String>,
}

fn stamps(path: &Path, source: Detector) -> Result<BTreeMap<String, Vec<TimedUtterance>>> {
    let mut out: BTreeMap<String, Vec<TimedUtterance>> = BTreeMap::new();
    for l in read_jsonl::<StampLine>(path)? {
        out.entry(l.recording_id).or_default().push(TimedUtterance {
            start_s: l.start_s,
            end_s: l.end_s,
            source,
            text: l.text,
            speaker_id: l.speaker_id,
        });
    }
    Ok(out)
}

fn chunk(a: ChunkArgs) -> Result<()> {
    let config = ChunkerConfig { min_silence_s: a.min_silence, ..ChunkerConfig::default() }
        .with_window(&a.window)
        .map_err(|e| anyhow!("{e}"))?;
    let chunker = SafeChunker::new(config);
    let ta = stamps(&a.timestamps_a, Detector::DetectorA)?;
    let tb = stamps(&a.timestamps_b, Detector::DetectorB)?;
    let mut jobs = Vec::new();
    let mut fallbacks = 0;
    let recordings: Vec<AudioLine> = read_jsonl(&a.audio_manifest)?;
    for rec in &recordings {
        let duration = match rec.duration_s {
            Some(d) => d,
            None => wav::inspect(&rec.audio_path).map_err(|e| anyhow!("{e}"))?.duration_s(),
        };
        let empty = Vec::new();
        let ua = ta.get(&rec.recording_id).unwrap_or(&empty);
        let ub = tb.get(&rec.recording_id).unwrap_or(&empty);
        let plan = chunker.plan(ua, ub, duration).with_context(|| format!("planning {}", rec.recording_id))?;
        fallbacks += plan.plan.fallback_cuts.len();
        let priors = if ub.is_empty() { ua } else { ub };
        let plan_path = a.out.join("plans").join(format!("{}.json", rec.recording_id));
        write_text(&plan_path, &(serde_json::to_string_pretty(&plan)? + "\n"))?;
        let chunk_jobs = chunk_jobs(&rec.recording_id, &rec.audio_path, rec.language, &plan.plan, priors)
            .with_context(|| format!("assigning priors of {}", rec.recording_id))?;
        jobs.extend(chunk_jobs.into_iter().map(Job::Chunk));
    }
    let mut text = String::new();
    for j in &jobs {
        text.push_str(&serde_json::to_string(j)?);
        text.push('\n');
    }
    write_text(&a.out.join("chunks.jsonl"), &text)?;
    println!(
        "{}",
        json!({ "recordings": recordings.len(), "chunks": jobs.len(), "fallback_cuts": fallbacks, "manifest": a.out.join("chunks.jsonl") })
    );
    Ok(())
}

fn annotate(a: AnnotateArgs) -> Result<()> {
    let jobs = parse_jobs(&read_text(&a.manifest)?).map_err(|e| anyhow!("{}: {e}", a.manifest.display()))?;
    let backend = http(&a.backend)?;
    let cfg = AnnotatorConfig {
        retry: RetryPolicy { max_attempts: a.retries.max(1), ..RetryPolicy::default() },
        audio_mode: audio_mode(&a.audio_mode)?,
        ..AnnotatorConfig::default()
    };
    let mode = match a.stage {
        AnnotateStage::One => PipelineMode::Stage1,
        AnnotateStage::Two => PipelineMode::Stage2,
        AnnotateStage::Ingest => PipelineMode::Ingest,
        AnnotateStage::Full => PipelineMode::Full,
    };
    let store = AnnotationStore::open(&a.out, &cfg.vocab).with_context(|| format!("opening store {}", a.out.display()))?;
    let report = run_pipeline(&jobs, &backend, &cfg, a.concurrency.max(1), mode, &store);
    let entries: Vec<ManifestEntry> = report.records.iter().cloned().map(ManifestEntry::new).collect();
    write_manifest(a.out.join("annotations.jsonl"), &entries)?;
    let failures: String = report.failures.iter().map(|f| serde_json::to_string(f).expect("serializes") + "\n").collect();
    write_text(&a.out.join("failures.jsonl"), &failures)?;
    println!(
        "{}",
        json!({
            "jobs": jobs.len(),
            "records": report.records.len(),
            "failures": report.failures.len(),
            "reused": report.reused,
            "refinements": report.refinements,
            "manifest": a.out.join("annotations.jsonl"),
        })
    );
    Ok(())
}

fn validate(a: ValidateArgs) -> Result<()> {
    let entries = records_of(&a.manifest)?;
    let map = BackendMap::from_json(&read_text(&a.backend_map)?).map_err(|e| anyhow!("{}: {e}", a.backend_map.display()))?;
    let experts = map.experts().map_err(|e| anyhow!("{e}"))?;
    let cfg = CascadeConfig {
        filters: parse_filter_list(&a.filters).map_err(|e| anyhow!(e))?,
        max_err: a.max_err,
        intensity_fail_open: a.intensity_fail_open,
        concurrency: a.concurrency.max(1),
        ..CascadeConfig::default()
    };
    let outcome = run_cascade(&entries, &experts, &cfg);
    write_manifest(&a.out, &outcome.survivors)?;
    let report = json!({ "stats": outcome.stats, "rejections": outcome.rejections });
    write_text(&a.report, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    println!("{}", json!({ "input": outcome.stats.input, "survivors": outcome.stats.survivors }));
    Ok(())
}

fn score_tpt(a: ScoreTptArgs) -> Result<()> {
    let text_of = |v: &Value| v.get("transcript_tagged").or_else(|| v.get("text")).and_then(Value::as_str).map(str::to_string);
    let id_of = |v: &Value| v.get("utterance_id").and_then(Value::as_str).map(str::to_string);
    let refs: Vec<Value> = read_jsonl(&a.refs)?;
    let hyps: BTreeMap<String, String> = read_jsonl::<Value>(&a.hyps)?
        .iter()
        .filter_map(|v| Some((id_of(v)?, v.get("text").and_then(Value::as_str)?.to_string())))
        .collect();
    let mut scores: Vec<PataScore> = Vec::new();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (i, r) in refs.iter().enumerate() {
        let id = id_of(r).ok_or_else(|| anyhow!("{}:{}: missing utterance_id", a.refs.display(), i + 1))?;
        let reference = text_of(r).ok_or_else(|| anyhow!("{}:{}: missing transcript_tagged/text", a.refs.display(), i + 1))?;
        let hyp = match hyps.get(&id) {
            Some(h) => h.clone(),
            None => {
                tracing::warn!(utterance = %id, "no hypothesis; scoring an empty one");
                String::new()
            }
        };
        let s = compute_pata(&reference, &hyp, a.lang, a.alpha, &vocab()).with_context(|| format!("scoring {id}"))?;
        writeln!(out, "{}", json!({ "utterance_id": id, "score": s }))?;
        scores.push(s);
    }
    let mean = speechgrain_core::metrics::mean_pata(&scores);
    writeln!(out, "{}", json!({ "mean_pata": mean, "n": scores.len(), "alpha": a.alpha }))?;
    Ok(())
}

fn targets(spec: &str) -> Result<Targets> {
    if spec == "published" {
        return Ok(Targets::published());
    }
    if let Some(n) = spec.strip_prefix("uniform:") {
        return Ok(Targets::uniform(n.parse().context("uniform:N needs an integer")?));
    }
    Targets::from_json(&read_text(Path::new(spec))?).map_err(|e| anyhow!("{spec}: {e}"))
}

fn build_bench(a: BuildBenchArgs) -> Result<()> {
    let entries = records_of(&a.manifest)?;
    let targets = targets(&a.targets)?;
    let backend = http(&a.backend)?;
    let mut cfg = BuildConfig { seed: a.seed, control_fraction: a.control_fraction, concurrency: a.concurrency.max(1), ..BuildConfig::default() };
    cfg.mcq.n_options = a.n_options;
    let (pkg, report) = build_package(&entries, &targets, &backend, &cfg);
    let summary = export_package(&pkg, &a.out, &cfg.admission).map_err(|e| anyhow!("{e}"))?;
    write_text(&a.out.join("build_report.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    println!(
        "{}",
        json!({
            "items": pkg.item_count(),
            "tpt": pkg.all_tpt().count(),
            "controls": summary.controls,
            "admitted": report.admitted,
            "shortfalls": report.shortfalls.len(),
            "dropped": report.dropped.len(),
            "warnings": summary.warnings,
        })
    );
    Ok(())
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().context("starting runtime")
}

fn bind_addr(host: &str, port: u16) -> Result<SocketAddr> {
    format!("{host}:{port}").parse().with_context(|| format!("bad address {host}:{port}"))
}

fn announce(addr: SocketAddr) {
    println!("listening on http://{addr}");
    let _ = std::io::stdout().flush();
}

fn review(cmd: ReviewCommand) -> Result<()> {
    match cmd {
        ReviewCommand::Serve { queue, port, host, log, audio_root } => {
            let log = log.unwrap_or_else(|| queue.with_extension("review-log.jsonl"));
            let q = ReviewQueue::open(&log, vocab()).map_err(|e| anyhow!("{e}"))?;
            let mut added = 0;
            for e in records_of(&queue)? {
                if q.get(&e.record.utterance_id).is_none() {
                    q.enqueue(e.record).map_err(|e| anyhow!("{e}"))?;
                    added += 1;
                }
            }
            tracing::info!(added, log = %log.display(), "queue ready");
            let svc = Arc::new(ReviewService::new(q, audio_root));
            let addr = bind_addr(&host, port)?;
            runtime()?.block_on(speechgrain_http::serve(review_router(svc), addr, announce))?;
            Ok(())
        }
        ReviewCommand::Export { log, out } => {
            if !log.exists() {
                bail!("no review log at {}", log.display());
            }
            let q = ReviewQueue::open(&log, vocab()).map_err(|e| anyhow!("{e}"))?;
            let retained = q.export_retained();
            match out {
                Some(path) => {
                    write_manifest(&path, &retained)?;
                    eprintln!("{} retained record(s) written to {}", retained.len(), path.display());
                }
                None => print!("{}", render_manifest(&retained)),
            }
            Ok(())
        }
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let pkg = import_package(&a.bench).map_err(|e| anyhow!("{}: {e}", a.bench.display()))?;
    let model = http(&a.model)?;
    let aligner = a.aligner.as_deref().map(http).transpose()?;
    let cfg = EvalConfig {
        protocol: a.protocol,
        skip_unparseable: a.skip_unparseable,
        skip_failed: a.skip_failed,
        audio_mode: audio_mode(&a.audio_mode)?,
        concurrency: a.concurrency.max(1),
        avg_mode: a.avg_mode,
        ..EvalConfig::default()
    };
    let run = run_eval(&pkg, &model, aligner.as_ref().map(|b| b as &dyn Backend), &cfg).map_err(|e| anyhow!("{e}"))?;
    write_text(&a.out, &(serde_json::to_string_pretty(&run)? + "\n"))?;
    let table = render_markdown(&run.report, &a.model_name);
    match &a.table {
        Some(p) => write_text(p, &table)?,
        None => print!("{table}"),
    }
    println!("{}", json!({ "avg": run.report.avg, "missing_cells": run.report.missing_cells.len() }));
    Ok(())
}

fn plain_records(path: &Path) -> Result<Vec<AnnotationRecord>> {
    Ok(records_of(path)?.into_iter().map(|e| e.record).collect())
}

fn mix(a: MixArgs) -> Result<()> {
    let cfg = MixConfig::default();
    match a.all {
        Some(MixCommand::All { plan, manifest, out, backend }) => {
            let plan: MixPlan = serde_json::from_str(&read_text(&plan)?).with_context(|| format!("parsing {}", plan.display()))?;
            let records = plain_records(&manifest)?;
            let generator = backend.as_deref().map(http).transpose()?;
            let src = generator.as_ref().map(|b| McqSource { backend: b, config: Default::default() });
            let stages = run_plan(&records, &plan, src.as_ref(), &cfg).map_err(|e| anyhow!("{e}"))?;
            let summary = emit_manifests(&stages, plan.seed, &out).map_err(|e| anyhow!("{e}"))?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        None => {
            let (manifest, stage, n, out) = (
                a.manifest.expect("required by clap"),
                a.stage.expect("required by clap"),
                a.n.expect("required by clap"),
                a.out.expect("required by clap"),
            );
            let records = plain_records(&manifest)?;
            let mix = StageMix::published(stage).map_err(|e| anyhow!("{e}"))?;
            let generator = a.backend.as_deref().map(http).transpose()?;
            let src = generator.as_ref().map(|b| McqSource { backend: b, config: Default::default() });
            let cfg = MixConfig { seed: a.seed, ..cfg };
            let manifest = build_stage(&records, &mix, n, src.as_ref(), &cfg).map_err(|e| anyhow!("{e}"))?;
            write_text(&out, &mixer::render_stage(&manifest))?;
            let name = out.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
            println!("{}", serde_json::to_string(&mixer::summarize(&manifest, &name))?);
        }
    }
    Ok(())
}

fn mock_backend(a: MockArgs) -> Result<()> {
    let mut mock = MockBackend::new();
    for path in &a.records {
        mock = mock.with_records(plain_records(path)?);
    }
    if let Some(dir) = &a.bench {
        let pkg = import_package(dir).map_err(|e| anyhow!("{}: {e}", dir.display()))?;
        mock = mock.with_answer_key(pkg.all_items().map(|i| (i.item_id.clone(), i.answer_index)));
    }
    let choose = match a.choose.as_str() {
        "key" => ChoosePolicy::Key,
        "free-text" => ChoosePolicy::FreeText,
        other => match other.strip_prefix("fixed:") {
            Some(t) => ChoosePolicy::Fixed(t.to_string()),
            None => bail!("unknown --choose `{other}` (expected key|free-text|fixed:<text>)"),
        },
    };
    let tagged = match a.tagged.as_str() {
        "echo" => TaggedPolicy::EchoReference,
        "strip" => TaggedPolicy::StripTags,
        "fabricate" => TaggedPolicy::FabricateTag,
        other => bail!("unknown --tagged `{other}` (expected echo|strip|fabricate)"),
    };
    let backend: Arc<dyn Backend> = Arc::new(mock.with_choose_policy(choose).with_tagged_policy(tagged));
    let addr = bind_addr(&a.host, a.port)?;
    runtime()?.block_on(speechgrain_http::serve(mock_router(backend), addr, announce))?;
    Ok(())
}
