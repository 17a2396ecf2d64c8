//! Silence-midpoint segmentation of long recordings.
//!
//! Speech intervals from two independent detectors are unioned; the
//! complement within `[0, total]` gives the silence regions. Cuts are placed
//! greedily left to right at the midpoint of a silence whose midpoint falls
//! `[min, max]` seconds after the previous cut. When no such silence exists
//! the planner falls back (flagged) to the next silence midpoint before
//! `c + 2*max`, then to the widest inter-utterance gap in `(c + min, c + 2*max)`.
//! Leading and trailing silences are never cut sites.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Detector {
    DetectorA,
    DetectorB,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedUtterance {
    pub start_s: f64,
    pub end_s: f64,
    pub source: Detector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_id: Option<String>,
}

/// Anything with a time span in seconds.
pub trait Span {
    fn start_s(&self) -> f64;
    fn end_s(&self) -> f64;
}

impl Span for TimedUtterance {
    fn start_s(&self) -> f64 {
        self.start_s
    }
    fn end_s(&self) -> f64 {
        self.end_s
    }
}

/// A merged speech interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start_s: f64,
    pub end_s: f64,
}

/// A span tagged with a caller-side key keeps its key through chunking.
impl<K, T: Span> Span for (K, T) {
    fn start_s(&self) -> f64 {
        self.1.start_s()
    }
    fn end_s(&self) -> f64 {
        self.1.end_s()
    }
}

impl Span for Interval {
    fn start_s(&self) -> f64 {
        self.start_s
    }
    fn end_s(&self) -> f64 {
        self.end_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SilenceRegion {
    pub start_s: f64,
    pub end_s: f64,
}

impl SilenceRegion {
    pub fn midpoint(&self) -> f64 {
        (self.start_s + self.end_s) / 2.0
    }

    pub fn len_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    /// Strict interior membership.
    pub fn contains(&self, t: f64) -> bool {
        self.start_s < t && t < self.end_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChunkerConfig {
    pub window_min_s: f64,
    pub window_max_s: f64,
    pub min_silence_s: f64,
}

impl Default for ChunkerConfig {
    fn default() -> Self {
        Self { window_min_s: 300.0, window_max_s: 360.0, min_silence_s: 0.2 }
    }
}

impl ChunkerConfig {
    /// Parses a `min:max` window such as `300:360`.
    pub fn with_window(mut self, spec: &str) -> Result<Self, ChunkError> {
        let (a, b) = spec.split_once(':').ok_or_else(|| ChunkError::InvalidWindow(spec.to_string()))?;
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| ChunkError::InvalidWindow(spec.to_string()));
        self.window_min_s = parse(a)?;
        self.window_max_s = parse(b)?;
        self.check()?;
        Ok(self)
    }

    fn check(&self) -> Result<(), ChunkError> {
        let ok = self.window_min_s.is_finite()
            && self.window_max_s.is_finite()
            && self.window_min_s > 0.0
            && self.window_min_s <= self.window_max_s
            && self.min_silence_s >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(ChunkError::InvalidWindow(format!("{}:{}", self.window_min_s, self.window_max_s)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub total_duration_s: f64,
    pub cuts: Vec<f64>,
    pub chunks: Vec<(f64, f64)>,
    pub fallback_cuts: Vec<f64>,
}

impl ChunkPlan {
    pub fn is_fallback(&self, cut: f64) -> bool {
        self.fallback_cuts.contains(&cut)
    }

    /// Whether the chunk at `index` ends on a fallback cut.
    pub fn chunk_ends_on_fallback(&self, index: usize) -> bool {
        self.cuts.get(index).is_some_and(|c| self.is_fallback(*c))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChunkError {
    #[error("interval [{start_s}, {end_s}] is negative or inverted")]
    InvalidInterval { start_s: f64, end_s: f64 },
    #[error("timeline duration must be positive, got {0}")]
    EmptyTimeline(f64),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("utterance [{start_s}, {end_s}] straddles cut at {cut}")]
    StraddlingUtterance { start_s: f64, end_s: f64, cut: f64 },
    #[error("invalid chunk window `{0}`")]
    InvalidWindow(String),
}

/// Union of both detectors' intervals as sorted, maximal, disjoint spans.
/// Touching intervals coalesce.
pub fn merge_speech_intervals(a: &[TimedUtterance], b: &[TimedUtterance]) -> Result<Vec<Interval>, ChunkError> {
    merge_intervals(a.iter().chain(b).map(|u| (u.start_s, u.end_s)))
}

pub fn merge_intervals(spans: impl IntoIterator<Item = (f64, f64)>) -> Result<Vec<Interval>, ChunkError> {
    let mut spans: Vec<(f64, f64)> = spans.into_iter().collect();
    for &(s, e) in &spans {
        if !(s.is_finite() && e.is_finite() && s >= 0.0 && s < e) {
            return Err(ChunkError::InvalidInterval { start_s: s, end_s: e });
        }
    }
    spans.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    let mut out: Vec<Interval> = Vec::with_capacity(spans.len());
    for (s, e) in spans {
        match out.last_mut() {
            Some(last) if s <= last.end_s => last.end_s = last.end_s.max(e),
            _ => out.push(Interval { start_s: s, end_s: e }),
        }
    }
    Ok(out)
}

fn check_sorted_disjoint<S: Span>(spans: &[S], total: f64, what: &str) -> Result<(), ChunkError> {
    let mut prev_end = 0.0f64;
    for s in spans {
        let ok = s.start_s() < s.end_s() && s.start_s() >= prev_end && s.end_s() <= total;
        if !ok {
            return Err(ChunkError::Precondition(format!(
                "{what} intervals must be sorted, disjoint and within [0, {total}]"
            )));
        }
        prev_end = s.end_s();
    }
    Ok(())
}

impl Span for SilenceRegion {
    fn start_s(&self) -> f64 {
        self.start_s
    }
    fn end_s(&self) -> f64 {
        self.end_s
    }
}

/// Complement of `speech` within `[0, total]`, dropping regions shorter than
/// `min_silence_s`.
pub fn complement_silences(
    speech: &[Interval],
    total_duration_s: f64,
    min_silence_s: f64,
) -> Result<Vec<SilenceRegion>, ChunkError> {
    if !(total_duration_s > 0.0) {
        return Err(ChunkError::EmptyTimeline(total_duration_s));
    }
    check_sorted_disjoint(speech, total_duration_s, "speech")?;
    let mut out = Vec::new();
    let mut cursor = 0.0;
    for s in speech.iter().map(|i| (i.start_s, i.end_s)).chain(std::iter::once((total_duration_s, total_duration_s))) {
        if s.0 > cursor && s.0 - cursor >= min_silence_s {
            out.push(SilenceRegion { start_s: cursor, end_s: s.0 });
        }
        cursor = s.1;
    }
    Ok(out)
}

/// Greedy cut planning. `speech` supplies inter-utterance gaps for the last
/// fallback tier; pass the merged intervals the silences came from.
pub fn plan_cuts(
    silences: &[SilenceRegion],
    speech: &[Interval],
    total_duration_s: f64,
    config: &ChunkerConfig,
) -> Result<ChunkPlan, ChunkError> {
    if !(total_duration_s > 0.0) || !total_duration_s.is_finite() {
        return Err(ChunkError::EmptyTimeline(total_duration_s));
    }
    config.check()?;
    check_sorted_disjoint(silences, total_duration_s, "silence")?;
    check_sorted_disjoint(speech, total_duration_s, "speech")?;

    // Edge silences (touching 0 or total) would only produce speechless chunks.
    let sites: Vec<SilenceRegion> = silences
        .iter()
        .copied()
        .filter(|s| s.start_s > 0.0 && s.end_s < total_duration_s)
        .collect();
    let gaps: Vec<SilenceRegion> = speech
        .windows(2)
        .map(|w| SilenceRegion { start_s: w[0].end_s, end_s: w[1].start_s })
        .collect();

    let (min, max) = (config.window_min_s, config.window_max_s);
    let mut cuts = Vec::new();
    let mut fallback_cuts = Vec::new();
    let mut c = 0.0;
    while total_duration_s - c > max {
        let lo = c + min;
        let hi = c + max;
        let in_window = longest_earliest(sites.iter().filter(|s| (lo..=hi).contains(&s.midpoint())));
        let (cut, fallback) = if let Some(s) = in_window {
            (s.midpoint(), false)
        } else if let Some(s) = sites.iter().find(|s| s.midpoint() > hi && s.midpoint() < c + 2.0 * max) {
            (s.midpoint(), true)
        } else if let Some(g) =
            longest_earliest(gaps.iter().filter(|g| g.midpoint() > lo && g.midpoint() < c + 2.0 * max))
        {
            (g.midpoint(), true)
        } else {
            tracing::warn!(from = c, "no cut site within two windows; keeping remainder as one chunk");
            break;
        };
        cuts.push(cut);
        if fallback {
            fallback_cuts.push(cut);
        }
        c = cut;
    }

    let mut chunks = Vec::with_capacity(cuts.len() + 1);
    let mut start = 0.0;
    for &cut in &cuts {
        chunks.push((start, cut));
        start = cut;
    }
    chunks.push((start, total_duration_s));
    Ok(ChunkPlan { total_duration_s, cuts, chunks, fallback_cuts })
}

fn longest_earliest<'a>(it: impl Iterator<Item = &'a SilenceRegion>) -> Option<&'a SilenceRegion> {
    // Equal lengths keep the earlier region.
    it.fold(None, |best: Option<&SilenceRegion>, s| match best {
        Some(b) if b.len_s() >= s.len_s() => Some(b),
        _ => Some(s),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk<T> {
    pub index: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub fallback_end: bool,
    pub members: Vec<T>,
}

/// Assigns each item to the chunk that contains it.
pub fn apply_cuts<T: Span + Clone>(plan: &ChunkPlan, items: &[T]) -> Result<Vec<Chunk<T>>, ChunkError> {
    let mut chunks: Vec<Chunk<T>> = plan
        .chunks
        .iter()
        .enumerate()
        .map(|(index, &(start_s, end_s))| Chunk {
            index,
            start_s,
            end_s,
            fallback_end: plan.chunk_ends_on_fallback(index),
            members: Vec::new(),
        })
        .collect();
    for item in items {
        let (s, e) = (item.start_s(), item.end_s());
        let idx = plan.chunks.partition_point(|c| c.0 <= s).max(1) - 1;
        let chunk = &mut chunks[idx];
        if e > chunk.end_s || s < chunk.start_s {
            return Err(ChunkError::StraddlingUtterance { start_s: s, end_s: e, cut: chunk.end_s });
        }
        chunk.members.push(item.clone());
    }
    Ok(chunks)
}

/// Merged speech, silences and cut plan for one recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingPlan {
    pub speech: Vec<Interval>,
    pub silences: Vec<SilenceRegion>,
    pub plan: ChunkPlan,
}

#[derive(Debug, Clone, Default)]
pub struct SafeChunker {
    pub config: ChunkerConfig,
}

impl SafeChunker {
    pub fn new(config: ChunkerConfig) -> Self {
        Self { config }
    }

    pub fn plan(
        &self,
        detector_a: &[TimedUtterance],
        detector_b: &[TimedUtterance],
        total_duration_s: f64,
    ) -> Result<RecordingPlan, ChunkError> {
        let speech = merge_speech_intervals(detector_a, detector_b)?;
        if speech.last().is_some_and(|s| s.end_s > total_duration_s) {
            return Err(ChunkError::Precondition(format!(
                "speech extends past the recording end ({total_duration_s} s)"
            )));
        }
        let silences = complement_silences(&speech, total_duration_s, self.config.min_silence_s)?;
        let plan = plan_cuts(&silences, &speech, total_duration_s, &self.config)?;
        Ok(RecordingPlan { speech, silences, plan })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn utt(s: f64, e: f64, source: Detector) -> TimedUtterance {
        TimedUtterance { start_s: s, end_s: e, source, text: None, speaker_id: None }
    }

    fn iv(s: f64, e: f64) -> Interval {
        Interval { start_s: s, end_s: e }
    }

    fn sil(s: f64, e: f64) -> SilenceRegion {
        SilenceRegion { start_s: s, end_s: e }
    }

    #[test]
    fn merge_examples() {
        let a = [utt(0.0, 5.0, Detector::DetectorA)];
        assert_eq!(merge_speech_intervals(&a, &[]).unwrap(), vec![iv(0.0, 5.0)]);
        let a = [utt(0.0, 5.0, Detector::DetectorA), utt(4.0, 9.0, Detector::DetectorA)];
        let b = [utt(8.0, 12.0, Detector::DetectorB)];
        assert_eq!(merge_speech_intervals(&a, &b).unwrap(), vec![iv(0.0, 12.0)]);
        let bad = [utt(3.0, 2.0, Detector::DetectorA)];
        assert!(matches!(merge_speech_intervals(&bad, &[]), Err(ChunkError::InvalidInterval { .. })));
        let neg = [utt(-1.0, 2.0, Detector::DetectorB)];
        assert!(merge_speech_intervals(&[], &neg).is_err());
    }

    /// Boolean timeline at 10 ms resolution.
    fn raster(spans: &[(u32, u32)], cells: usize) -> Vec<bool> {
        let mut t = vec![false; cells];
        for &(s, e) in spans {
            for c in &mut t[s as usize..e as usize] {
                *c = true;
            }
        }
        t
    }

    proptest! {
        #[test]
        fn merge_matches_raster_union(
            a in prop::collection::vec((0u32..5000, 1u32..300), 0..50),
            b in prop::collection::vec((0u32..5000, 1u32..300), 0..50),
        ) {
            let a: Vec<(u32, u32)> = a.into_iter().map(|(s, l)| (s, s + l)).collect();
            let b: Vec<(u32, u32)> = b.into_iter().map(|(s, l)| (s, s + l)).collect();
            let to_utt = |v: &[(u32, u32)], d| v.iter().map(|&(s, e)| utt(s as f64 / 100.0, e as f64 / 100.0, d)).collect::<Vec<_>>();
            let merged = merge_speech_intervals(&to_utt(&a, Detector::DetectorA), &to_utt(&b, Detector::DetectorB)).unwrap();
            let all: Vec<(u32, u32)> = a.iter().chain(&b).copied().collect();
            let expected = raster(&all, 5400);
            let got_spans: Vec<(u32, u32)> = merged.iter().map(|i| ((i.start_s * 100.0).round() as u32, (i.end_s * 100.0).round() as u32)).collect();
            prop_assert_eq!(raster(&got_spans, 5400), expected);
            for w in merged.windows(2) {
                prop_assert!(w[0].end_s < w[1].start_s);
            }
        }
    }

    #[test]
    fn complement_examples() {
        assert_eq!(complement_silences(&[iv(0.0, 10.0)], 10.0, 0.2).unwrap(), vec![]);
        assert_eq!(complement_silences(&[], 60.0, 0.2).unwrap(), vec![sil(0.0, 60.0)]);
        assert_eq!(
            complement_silences(&[iv(0.0, 310.0), iv(320.0, 700.0)], 705.0, 0.2).unwrap(),
            vec![sil(310.0, 320.0), sil(700.0, 705.0)]
        );
        // A 0.1 s pause is dropped.
        assert_eq!(complement_silences(&[iv(0.0, 5.0), iv(5.1, 10.0)], 10.0, 0.2).unwrap(), vec![]);
        assert!(complement_silences(&[iv(0.0, 5.0)], 0.0, 0.2).is_err());
        assert!(complement_silences(&[iv(0.0, 50.0)], 10.0, 0.2).is_err());
    }

    #[test]
    fn plan_below_window_minimum() {
        let plan = plan_cuts(&[sil(100.0, 110.0)], &[iv(0.0, 100.0), iv(110.0, 240.0)], 240.0, &ChunkerConfig::default()).unwrap();
        assert!(plan.cuts.is_empty());
        assert_eq!(plan.chunks, vec![(0.0, 240.0)]);
    }

    #[test]
    fn plan_hand_traces() {
        let cfg = ChunkerConfig::default();
        let speech = [iv(0.0, 310.0), iv(320.0, 700.0)];
        let plan = plan_cuts(&[sil(310.0, 320.0), sil(700.0, 705.0)], &speech, 705.0, &cfg).unwrap();
        assert_eq!(plan.cuts, vec![315.0]);
        assert_eq!(plan.chunks, vec![(0.0, 315.0), (315.0, 705.0)]);
        assert!(plan.fallback_cuts.is_empty());

        let speech = [iv(0.0, 310.0), iv(320.0, 640.0), iv(650.0, 700.0)];
        let sils = [sil(310.0, 320.0), sil(640.0, 650.0), sil(700.0, 705.0)];
        let plan = plan_cuts(&sils, &speech, 705.0, &cfg).unwrap();
        assert_eq!(plan.cuts, vec![315.0, 645.0]);
    }

    #[test]
    fn plan_prefers_longest_then_earliest() {
        let cfg = ChunkerConfig::default();
        let speech = [iv(0.0, 300.0), iv(302.0, 330.0), iv(335.0, 340.0), iv(345.0, 800.0)];
        let sils = [sil(300.0, 302.0), sil(330.0, 335.0), sil(340.0, 345.0)];
        let plan = plan_cuts(&sils, &speech, 800.0, &cfg).unwrap();
        assert_eq!(plan.cuts[0], 332.5);
    }

    #[test]
    fn plan_fallback_to_next_silence() {
        let cfg = ChunkerConfig::default();
        let speech = [iv(0.0, 395.0), iv(405.0, 900.0)];
        let sils = [sil(395.0, 405.0)];
        let plan = plan_cuts(&sils, &speech, 900.0, &cfg).unwrap();
        assert_eq!(plan.cuts, vec![400.0]);
        assert_eq!(plan.fallback_cuts, vec![400.0]);
    }

    #[test]
    fn plan_fallback_to_short_gap() {
        // Only a 0.1 s pause (below min_silence) exists; it becomes a flagged cut.
        let cfg = ChunkerConfig::default();
        let speech = [iv(0.0, 500.0), iv(500.1, 1000.0)];
        let sils = complement_silences(&speech, 1000.0, cfg.min_silence_s).unwrap();
        assert!(sils.is_empty());
        let plan = plan_cuts(&sils, &speech, 1000.0, &cfg).unwrap();
        assert_eq!(plan.cuts, vec![500.05]);
        assert!(plan.is_fallback(500.05));
        let chunks = apply_cuts(&plan, &speech).unwrap();
        assert_eq!(chunks[0].members, vec![speech[0]]);
        assert_eq!(chunks[1].members, vec![speech[1]]);
        assert!(chunks[0].fallback_end);
    }

    #[test]
    fn plan_rejects_empty_timeline() {
        assert_eq!(plan_cuts(&[], &[], 0.0, &ChunkerConfig::default()), Err(ChunkError::EmptyTimeline(0.0)));
    }

    #[test]
    fn apply_partitions_around_cut() {
        let cfg = ChunkerConfig::default();
        let speech = [iv(0.0, 310.0), iv(320.0, 700.0)];
        let plan = plan_cuts(&[sil(310.0, 320.0), sil(700.0, 705.0)], &speech, 705.0, &cfg).unwrap();
        let chunks = apply_cuts(&plan, &speech).unwrap();
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[0].members, vec![speech[0]]);
        assert_eq!(chunks[1].members, vec![speech[1]]);

        let single = ChunkPlan { total_duration_s: 10.0, cuts: vec![], chunks: vec![(0.0, 10.0)], fallback_cuts: vec![] };
        assert_eq!(apply_cuts(&single, &[iv(1.0, 2.0), iv(3.0, 9.0)]).unwrap()[0].members.len(), 2);

        let bad = ChunkPlan { total_duration_s: 10.0, cuts: vec![5.0], chunks: vec![(0.0, 5.0), (5.0, 10.0)], fallback_cuts: vec![] };
        assert!(matches!(apply_cuts(&bad, &[iv(4.0, 6.0)]), Err(ChunkError::StraddlingUtterance { .. })));
    }

    #[test]
    fn window_parsing() {
        let cfg = ChunkerConfig::default().with_window("240:300").unwrap();
        assert_eq!((cfg.window_min_s, cfg.window_max_s), (240.0, 300.0));
        assert!(ChunkerConfig::default().with_window("300").is_err());
        assert!(ChunkerConfig::default().with_window("400:300").is_err());
    }
}
