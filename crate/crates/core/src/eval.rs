//! Query generation and Top-1 scoring.
//!
//! Every track is degraded from start to end (full-length IRs), then one
//! random 30 s chunk is cut from the result. Query sequences are taken at
//! equally spaced segment indices inside the chunk's fingerprints, so every
//! track contributes the same number of queries per length and no query
//! spans two tracks.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::degrade::{degrade_chain, AssetStore, ChainOptions, DegradationPlan, DegradationRanges, Split};
use crate::error::{Error, Result};
use crate::features::SegmentSpec;
use crate::index::{sequence_search, CandidateScore, FingerprintDb, IvfIndex, SearchParams};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuerySpec {
    pub chunk_s: f64,
    pub n_start_indices: usize,
    pub seq_lengths: Vec<usize>,
    /// Cut chunks on the segment grid so exact matches are well defined.
    pub snap_to_grid: bool,
}

impl Default for QuerySpec {
    fn default() -> Self {
        Self {
            chunk_s: 30.0,
            n_start_indices: 6,
            seq_lengths: alloc::vec![1, 3, 9, 19],
            snap_to_grid: true,
        }
    }
}

impl QuerySpec {
    pub fn validate(&self, seg: &SegmentSpec, rate: u32) -> Result<()> {
        if self.n_start_indices == 0 || self.seq_lengths.is_empty() || self.seq_lengths.contains(&0) {
            return Err(Error::config(
                "need at least one start index and positive sequence lengths",
            ));
        }
        let n = self.chunk_segments(seg, rate);
        if let Some(&l) = self.seq_lengths.iter().find(|&&l| l > n) {
            return Err(Error::config(alloc::format!(
                "sequence length {l} exceeds the {n} segments of a chunk"
            )));
        }
        Ok(())
    }

    pub fn chunk_samples(&self, rate: u32) -> usize {
        libm::round(self.chunk_s * f64::from(rate)) as usize
    }

    pub fn chunk_segments(&self, seg: &SegmentSpec, rate: u32) -> usize {
        seg.segment_count(self.chunk_samples(rate), rate)
    }
}

/// `round(linspace(0, n_segments - len, n))`.
pub fn start_indices(n_segments: usize, len: usize, n: usize) -> Result<Vec<usize>> {
    if len == 0 || len > n_segments || n == 0 {
        return Err(Error::config(alloc::format!(
            "cannot place {n} sequences of length {len} in {n_segments} segments"
        )));
    }
    let max = (n_segments - len) as f64;
    Ok((0..n)
        .map(|i| {
            if n == 1 {
                0
            } else {
                libm::round(max * i as f64 / (n - 1) as f64) as usize
            }
        })
        .collect())
}

/// Audio duration covered by `len` consecutive segments.
pub fn sequence_seconds(len: usize, seg: &SegmentSpec) -> f64 {
    seg.window_s + (len.saturating_sub(1)) as f64 * seg.hop_s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub track_id: String,
    /// Segment index in the reference track where the chunk begins.
    pub chunk_start_segment: usize,
    /// Exact chunk start in samples (before grid rounding).
    pub chunk_start_sample: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryChunk {
    pub audio: AudioBuffer,
    pub truth: GroundTruth,
    pub plan: DegradationPlan,
}

/// Where query degradations come from; `None` in [`make_queries`] gives clean
/// chunks.
#[derive(Debug, Clone, Copy)]
pub struct QueryDegradation<'a> {
    pub assets: &'a AssetStore,
    pub split: Split,
    pub ranges: &'a DegradationRanges,
}

/// One degraded chunk per track. Track `i` uses a generator derived from
/// `(seed, i)`, so the query set does not depend on processing order.
pub fn make_queries(
    tracks: &[(String, AudioBuffer)],
    degradation: Option<QueryDegradation<'_>>,
    spec: &QuerySpec,
    seg: &SegmentSpec,
    seed: u64,
) -> Result<Vec<QueryChunk>> {
    tracks
        .iter()
        .enumerate()
        .map(|(i, (id, audio))| make_query(id, audio, degradation, spec, seg, seed, i as u64))
        .collect()
}

pub fn make_query(
    track_id: &str,
    audio: &AudioBuffer,
    degradation: Option<QueryDegradation<'_>>,
    spec: &QuerySpec,
    seg: &SegmentSpec,
    seed: u64,
    track_index: u64,
) -> Result<QueryChunk> {
    let rate = audio.sample_rate();
    let chunk = spec.chunk_samples(rate);
    if audio.len() < chunk {
        return Err(Error::TooShort {
            needed: chunk,
            got: audio.len(),
        });
    }
    let mut rng = crate::seeded_rng(seed ^ track_index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let plan = match degradation {
        Some(d) => d.assets.sample_plan(d.split, d.ranges, &mut rng),
        None => DegradationPlan::identity(),
    };
    let empty = AssetStore::new();
    let assets = degradation.map_or(&empty, |d| d.assets);
    let degraded = degrade_chain(audio, 0, audio.len(), &plan, assets, &ChainOptions::query())?;
    let hop = seg.hop_samples(rate);
    let (start, start_seg) = if spec.snap_to_grid {
        let k = rng.gen_range(0..=(audio.len() - chunk) / hop);
        (k * hop, k)
    } else {
        let s = rng.gen_range(0..=audio.len() - chunk);
        (s, libm::round(s as f64 / hop as f64) as usize)
    };
    Ok(QueryChunk {
        audio: degraded.audio.slice(start, chunk)?,
        truth: GroundTruth {
            track_id: track_id.into(),
            chunk_start_segment: start_seg,
            chunk_start_sample: start,
        },
        plan,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub seq_length: usize,
    pub truth_track: String,
    /// Reference-track segment index of the query's first segment.
    pub truth_start: usize,
    /// Top-1 track id and track-local start, if any candidate survived.
    pub predicted: Option<(String, usize)>,
}

/// Runs every query sequence of one chunk (fingerprints `chunk_fps`, one row
/// per chunk segment) against the database.
pub fn evaluate_chunk(
    index: &IvfIndex,
    db: &FingerprintDb,
    chunk_fps: &Matrix<f32>,
    truth: &GroundTruth,
    spec: &QuerySpec,
    params: &SearchParams,
) -> Result<Vec<QueryResult>> {
    let mut out = Vec::new();
    for &len in &spec.seq_lengths {
        for s in start_indices(chunk_fps.rows(), len, spec.n_start_indices)? {
            let idx: Vec<usize> = (s..s + len).collect();
            let q = chunk_fps.select_rows(&idx);
            let ranked = sequence_search(index, db, &q, params);
            out.push(QueryResult {
                seq_length: len,
                truth_track: truth.track_id.clone(),
                truth_start: truth.chunk_start_segment + s,
                predicted: ranked.first().map(|c| top1_label(db, c)),
            });
        }
    }
    Ok(out)
}

fn top1_label(db: &FingerprintDb, c: &CandidateScore) -> (String, usize) {
    let b = &db.boundaries()[c.track];
    (b.track_id.clone(), c.db_start_index - b.start_index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthReport {
    pub seq_length: usize,
    pub seconds: f64,
    pub n_queries: usize,
    pub track_hits: usize,
    pub exact_hits: usize,
    pub near_hits: usize,
    pub track_top1: f64,
    pub segment_exact_top1: f64,
    pub segment_near_top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub lengths: Vec<LengthReport>,
}

/// Aggregates results per sequence length (in order of first appearance of
/// each length in `spec`).
pub fn score(results: &[QueryResult], spec: &QuerySpec, seg: &SegmentSpec) -> EvalReport {
    let lengths = spec
        .seq_lengths
        .iter()
        .map(|&len| {
            let mut r = LengthReport {
                seq_length: len,
                seconds: sequence_seconds(len, seg),
                n_queries: 0,
                track_hits: 0,
                exact_hits: 0,
                near_hits: 0,
                track_top1: 0.0,
                segment_exact_top1: 0.0,
                segment_near_top1: 0.0,
            };
            for q in results.iter().filter(|q| q.seq_length == len) {
                r.n_queries += 1;
                if let Some((track, start)) = &q.predicted {
                    if *track == q.truth_track {
                        r.track_hits += 1;
                        let gap = start.abs_diff(q.truth_start);
                        r.exact_hits += usize::from(gap == 0);
                        r.near_hits += usize::from(gap <= 1);
                    }
                }
            }
            let pct = |hits: usize| {
                if r.n_queries == 0 {
                    0.0
                } else {
                    100.0 * hits as f64 / r.n_queries as f64
                }
            };
            r.track_top1 = pct(r.track_hits);
            r.segment_exact_top1 = pct(r.exact_hits);
            r.segment_near_top1 = pct(r.near_hits);
            r
        })
        .collect();
    EvalReport { lengths }
}

impl EvalReport {
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>6} {:>7} {:>8} {:>9} {:>9} {:>9}",
            "length", "seconds", "queries", "track%", "exact%", "near%"
        );
        for r in &self.lengths {
            let _ = writeln!(
                s,
                "{:>6} {:>7.1} {:>8} {:>9.2} {:>9.2} {:>9.2}",
                r.seq_length, r.seconds, r.n_queries, r.track_top1, r.segment_exact_top1, r.segment_near_top1
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    #[test]
    fn linspace_starts() {
        assert_eq!(start_indices(59, 19, 6).unwrap(), alloc::vec![0, 8, 16, 24, 32, 40]);
        assert_eq!(start_indices(59, 1, 6).unwrap(), alloc::vec![0, 12, 23, 35, 46, 58]);
        // Independent oracle: same formula in floating point, round half away from zero.
        for len in [1usize, 3, 9, 19] {
            let got = start_indices(59, len, 6).unwrap();
            for (i, g) in got.iter().enumerate() {
                let want = ((59 - len) as f64 * i as f64 / 5.0 + 0.5).floor() as usize;
                assert_eq!(*g, want);
                assert!(g + len <= 59);
            }
        }
        assert!(start_indices(5, 6, 2).is_err());
        assert_eq!(start_indices(5, 5, 3).unwrap(), alloc::vec![0, 0, 0]);
    }

    #[test]
    fn lengths_map_to_seconds() {
        let seg = SegmentSpec::default();
        let secs: Vec<f64> = [1, 3, 9, 19].iter().map(|&l| sequence_seconds(l, &seg)).collect();
        assert_eq!(secs, alloc::vec![1.0, 2.0, 5.0, 10.0]);
        assert_eq!(QuerySpec::default().chunk_segments(&seg, 8000), 59);
    }

    #[test]
    fn clean_queries_are_exact_slices() {
        let tracks = synth::music_corpus(3, 2, 40.0, 8000).unwrap();
        let spec = QuerySpec::default();
        let seg = SegmentSpec::default();
        let q = make_queries(&tracks, None, &spec, &seg, 7).unwrap();
        assert_eq!(q, make_queries(&tracks, None, &spec, &seg, 7).unwrap());
        for (chunk, (id, audio)) in q.iter().zip(&tracks) {
            assert_eq!(&chunk.truth.track_id, id);
            let s = chunk.truth.chunk_start_sample;
            assert_eq!(s, chunk.truth.chunk_start_segment * 4000);
            assert_eq!(chunk.audio.samples(), &audio.samples()[s..s + 240_000]);
        }
    }

    #[test]
    fn degraded_queries_use_the_test_split() {
        let tracks = synth::music_corpus(4, 1, 31.0, 8000).unwrap();
        let assets = synth::asset_store(5, synth::AssetCounts::default(), 8000).unwrap();
        let ranges = DegradationRanges::default();
        let d = QueryDegradation {
            assets: &assets,
            split: Split::Test,
            ranges: &ranges,
        };
        let q = make_queries(&tracks, Some(d), &QuerySpec::default(), &SegmentSpec::default(), 1).unwrap();
        assert!(q[0].plan.room_ir_id.as_deref().unwrap().contains("test"));
        assert_ne!(q[0].audio.samples(), &tracks[0].1.samples()[..240_000]);
        let short = synth::music_corpus(4, 1, 29.0, 8000).unwrap();
        assert!(make_queries(&short, None, &QuerySpec::default(), &SegmentSpec::default(), 1).is_err());
    }

    fn result(len: usize, truth: usize, pred: Option<(&str, usize)>) -> QueryResult {
        QueryResult {
            seq_length: len,
            truth_track: "a".into(),
            truth_start: truth,
            predicted: pred.map(|(t, s)| (t.into(), s)),
        }
    }

    #[test]
    fn scoring_definitions() {
        let spec = QuerySpec {
            seq_lengths: alloc::vec![1, 3],
            ..QuerySpec::default()
        };
        let res = alloc::vec![
            result(1, 10, Some(("a", 10))),
            result(1, 10, Some(("a", 11))),
            result(1, 10, Some(("a", 9))),
            result(1, 10, Some(("b", 10))),
            result(3, 5, None),
            result(3, 5, Some(("a", 7))),
        ];
        let rep = score(&res, &spec, &SegmentSpec::default());
        let l1 = &rep.lengths[0];
        assert_eq!((l1.n_queries, l1.track_hits, l1.exact_hits, l1.near_hits), (4, 3, 1, 3));
        assert_eq!(l1.track_top1, 75.0);
        let l3 = &rep.lengths[1];
        assert_eq!((l3.track_hits, l3.exact_hits, l3.near_hits), (1, 0, 0));
        assert_eq!(l3.seconds, 2.0);
        for r in &rep.lengths {
            assert!(r.segment_near_top1 >= r.segment_exact_top1);
        }
        assert!(rep.render_table().contains("length"));
        assert!(rep.to_json().contains("segment_near_top1"));
    }

    #[test]
    fn all_correct_scores_100() {
        let res: Vec<QueryResult> = (0..6).map(|i| result(9, i, Some(("a", i)))).collect();
        let spec = QuerySpec {
            seq_lengths: alloc::vec![9],
            ..QuerySpec::default()
        };
        let r = &score(&res, &spec, &SegmentSpec::default()).lengths[0];
        assert_eq!(
            (r.track_top1, r.segment_exact_top1, r.segment_near_top1),
            (100.0, 100.0, 100.0)
        );
    }
}
