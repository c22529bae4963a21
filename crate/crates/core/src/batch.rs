//! Training batch construction: one anchor segment per distinct track (so
//! no same-track pair is ever treated as a negative), each followed by
//! positives that are independently shifted and degraded copies of it.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::{AssetStore, DegradationPlan, DegradationRanges, Split};
use crate::error::{Error, Result};
use crate::features::{random_offset, SegmentSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositiveSpec {
    /// Window start in the track (anchor start plus a random offset).
    pub start: usize,
    pub plan: DegradationPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPlan {
    /// Index into the track pool.
    pub track: usize,
    /// Grid-aligned anchor window start.
    pub anchor_start: usize,
    pub positives: Vec<PositiveSpec>,
}

/// Segment selections and degradation plans for one batch, in batch row
/// order: group `g` becomes rows `g * (1 + n_ppa) ..`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub groups: Vec<GroupPlan>,
    pub n_ppa: usize,
}

impl BatchPlan {
    pub fn n_anchors(&self) -> usize {
        self.groups.len()
    }

    /// `N_B = N_A (1 + N_PPA)`.
    pub fn total_samples(&self) -> usize {
        self.groups.len() * (1 + self.n_ppa)
    }

    /// Track index of every row, in row order.
    pub fn row_tracks(&self) -> Vec<usize> {
        self.groups
            .iter()
            .flat_map(|g| core::iter::repeat_n(g.track, 1 + self.n_ppa))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct BatchSampler<'a> {
    /// Length in samples of every track in the pool.
    pub track_lens: &'a [usize],
    pub sample_rate: u32,
    pub segment: &'a SegmentSpec,
    pub assets: &'a AssetStore,
    pub split: Split,
    pub ranges: &'a DegradationRanges,
}

impl BatchSampler<'_> {
    /// Draws `n_anchors` distinct tracks without replacement, one random grid
    /// segment per track as anchor, and `n_ppa` positives per anchor.
    pub fn build_batch<R: Rng + ?Sized>(&self, n_anchors: usize, n_ppa: usize, rng: &mut R) -> Result<BatchPlan> {
        if n_anchors == 0 || n_ppa == 0 {
            return Err(Error::Batch("need n_anchors >= 1 and n_ppa >= 1".into()));
        }
        if self.track_lens.len() < n_anchors {
            return Err(Error::Batch(alloc::format!(
                "track pool of {} cannot fill {n_anchors} anchors",
                self.track_lens.len()
            )));
        }
        let rate = self.sample_rate;
        let hop = self.segment.hop_samples(rate);
        let tracks = rand::seq::index::sample(rng, self.track_lens.len(), n_anchors);
        let mut groups = Vec::with_capacity(n_anchors);
        for track in tracks.iter() {
            let len = self.track_lens[track];
            let n_seg = self.segment.segment_count(len, rate);
            if n_seg == 0 {
                return Err(Error::TooShort {
                    needed: self.segment.window_samples(rate),
                    got: len,
                });
            }
            let anchor_start = rng.gen_range(0..n_seg) * hop;
            let positives = (0..n_ppa)
                .map(|_| PositiveSpec {
                    start: random_offset(anchor_start, len, rate, self.segment, rng),
                    plan: self.assets.sample_plan(self.split, self.ranges, rng),
                })
                .collect();
            groups.push(GroupPlan {
                track,
                anchor_start,
                positives,
            });
        }
        Ok(BatchPlan { groups, n_ppa })
    }
}
