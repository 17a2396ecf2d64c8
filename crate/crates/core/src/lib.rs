//! Toolkit for curating fine-grained speech-attribute corpora, building
//! multiple-choice and tagged-transcription benchmarks from them, scoring
//! models against those benchmarks, and mixing curriculum training data.
//!
//! Every neural component (annotator, expert classifiers, evaluated models,
//! response aligner) sits behind the [`backend::Backend`] wire contract, so
//! the algorithmic parts run against deterministic mocks at desk scale.
//!
//! Module map:
//!
//! - [`schema`]: the 14-dimension annotation record, tag vocabulary, manifests.
//! - [`metrics`]: tokenization, Levenshtein alignment, WER/CER, tag F1, PATA.
//! - [`chunker`]: silence-midpoint segmentation of long recordings.
//! - [`annotate`]: two-stage annotation orchestration and external ingest.
//! - [`crossval`]: multi-expert filter cascade.
//! - [`bench`]: admission, stratified sampling, MCQ generation, packaging.
//! - [`review`]: two-expert + adjudicator verification state machine.
//! - [`harness`]: MCQ/TPT evaluation and report aggregation.
//! - [`mixer`]: Type I/II/III instance formulation and stage mixing.
//! - [`mock`]: deterministic in-process backend for every endpoint.

pub mod annotate;
pub mod backend;
pub mod bench;
pub mod chunker;
pub mod crossval;
pub mod harness;
pub mod metrics;
pub mod mixer;
pub mod mock;
pub mod par;
pub mod prompts;
pub mod review;
pub mod schema;
pub mod wav;

pub use schema::{AnnotationRecord, AttributeDimension, Language, Tag, TagVocabulary, Tier};
