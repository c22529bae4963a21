//! Fingerprint storage with track boundaries, an IVF index over it, and
//! two-stage sequence retrieval: per-segment approximate candidates, then
//! rescoring of candidate windows by mean inner product.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ConfigDigest;
use crate::linalg::{dot, norm, normalize, sq_dist, Matrix};

/// Rows whose norm is off by more than this are re-normalized and reported.
pub const RENORM_TOL: f64 = 1e-3;
pub const KMEANS_ITERS: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackBoundary {
    pub track_id: String,
    pub start_index: usize,
    pub n_segments: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintDb {
    vectors: Matrix<f32>,
    boundaries: Vec<TrackBoundary>,
    digest: ConfigDigest,
}

/// Result of [`FingerprintDb::build`]: the database plus the rows that had to
/// be re-normalized.
#[derive(Debug, Clone)]
pub struct BuiltDb {
    pub db: FingerprintDb,
    pub renormalized: Vec<usize>,
}

impl FingerprintDb {
    /// Concatenates per-track fingerprints in the given order.
    pub fn build<I, S>(tracks: I, digest: ConfigDigest) -> Result<BuiltDb>
    where
        I: IntoIterator<Item = (S, Matrix<f32>)>,
        S: Into<String>,
    {
        let mut dim = None;
        let mut data = Vec::new();
        let mut boundaries = Vec::new();
        let mut renormalized = Vec::new();
        let mut total = 0;
        for (id, fps) in tracks {
            let id = id.into();
            if fps.rows() == 0 {
                return Err(Error::Empty("track without fingerprints"));
            }
            match dim {
                None => dim = Some(fps.cols()),
                Some(d) if d != fps.cols() => {
                    return Err(Error::shape(alloc::format!(
                        "track {id} has dim {}, expected {d}",
                        fps.cols()
                    )))
                }
                _ => {}
            }
            for r in 0..fps.rows() {
                let mut row = fps.row(r).to_vec();
                let n = f64::from(norm(&row));
                if !n.is_finite() || n == 0.0 {
                    return Err(Error::shape(alloc::format!("track {id} row {r} has norm {n}")));
                }
                if (n - 1.0).abs() > RENORM_TOL {
                    normalize(&mut row);
                    renormalized.push(total + r);
                }
                data.extend_from_slice(&row);
            }
            boundaries.push(TrackBoundary {
                track_id: id,
                start_index: total,
                n_segments: fps.rows(),
            });
            total += fps.rows();
        }
        let dim = dim.ok_or(Error::Empty("fingerprint stream"))?;
        Ok(BuiltDb {
            db: Self {
                vectors: Matrix::from_vec(total, dim, data)?,
                boundaries,
                digest,
            },
            renormalized,
        })
    }

    /// Reassembles a database read from storage; boundaries must tile the rows.
    pub fn from_parts(vectors: Matrix<f32>, boundaries: Vec<TrackBoundary>, digest: ConfigDigest) -> Result<Self> {
        let mut next = 0;
        for b in &boundaries {
            if b.start_index != next || b.n_segments == 0 {
                return Err(Error::shape(alloc::format!(
                    "boundary of {} starts at {} (expected {next}) with {} segments",
                    b.track_id,
                    b.start_index,
                    b.n_segments
                )));
            }
            next += b.n_segments;
        }
        if next != vectors.rows() {
            return Err(Error::shape(alloc::format!(
                "boundaries cover {next} rows, database has {}",
                vectors.rows()
            )));
        }
        Ok(Self {
            vectors,
            boundaries,
            digest,
        })
    }

    pub fn vectors(&self) -> &Matrix<f32> {
        &self.vectors
    }

    pub fn boundaries(&self) -> &[TrackBoundary] {
        &self.boundaries
    }

    pub fn digest(&self) -> &ConfigDigest {
        &self.digest
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    /// Boundary index of the track holding row `index`.
    pub fn track_of(&self, index: usize) -> Option<usize> {
        if index >= self.len() {
            return None;
        }
        let pos = self.boundaries.partition_point(|b| b.start_index <= index);
        Some(pos - 1)
    }

    /// Track holding the whole window `[start, start + len)`, if any.
    pub fn window_track(&self, start: usize, len: usize) -> Option<usize> {
        let t = self.track_of(start)?;
        let b = &self.boundaries[t];
        (len >= 1 && start + len <= b.start_index + b.n_segments).then_some(t)
    }

    pub fn track_index(&self, track_id: &str) -> Option<usize> {
        self.boundaries.iter().position(|b| b.track_id == track_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    centroids: Matrix<f32>,
    lists: Vec<Vec<u32>>,
    nprobe: usize,
}

impl IvfIndex {
    /// Spherical k-means (k-means++ seeding, [`KMEANS_ITERS`] rounds) with
    /// assignment by maximum inner product.
    pub fn build(db: &FingerprintDb, nlist: usize, nprobe: usize, seed: u64) -> Result<Self> {
        if nlist < 1 {
            return Err(Error::config("nlist must be at least 1"));
        }
        if db.len() < nlist {
            return Err(Error::config(alloc::format!(
                "nlist {nlist} exceeds the {} database rows",
                db.len()
            )));
        }
        let x = db.vectors();
        let mut rng = crate::seeded_rng(seed);
        let mut centroids = kmeans_pp(x, nlist, &mut rng);
        let mut assign = assign_all(x, &centroids);
        for _ in 0..KMEANS_ITERS {
            let mut sums = Matrix::<f64>::zeros(nlist, x.cols());
            let mut counts = alloc::vec![0usize; nlist];
            for (r, &c) in assign.iter().enumerate() {
                counts[c] += 1;
                for (s, &v) in sums.row_mut(c).iter_mut().zip(x.row(r)) {
                    *s += f64::from(v);
                }
            }
            for c in 0..nlist {
                // Empty clusters keep their previous centroid.
                if counts[c] == 0 {
                    continue;
                }
                let row = sums.row_mut(c);
                if normalize(row) > 0.0 {
                    for (d, &s) in centroids.row_mut(c).iter_mut().zip(row.iter()) {
                        *d = s as f32;
                    }
                }
            }
            let next = assign_all(x, &centroids);
            if next == assign {
                break;
            }
            assign = next;
        }
        let mut lists = alloc::vec![Vec::new(); nlist];
        for (r, &c) in assign.iter().enumerate() {
            lists[c].push(r as u32);
        }
        Self::from_parts(centroids, lists, nprobe)
    }

    pub fn from_parts(centroids: Matrix<f32>, lists: Vec<Vec<u32>>, nprobe: usize) -> Result<Self> {
        if centroids.rows() != lists.len() || lists.is_empty() {
            return Err(Error::shape("one inverted list per centroid required"));
        }
        if nprobe == 0 || nprobe > lists.len() {
            return Err(Error::config(alloc::format!(
                "nprobe must lie in [1, {}], got {nprobe}",
                lists.len()
            )));
        }
        Ok(Self {
            centroids,
            lists,
            nprobe,
        })
    }

    pub fn nlist(&self) -> usize {
        self.lists.len()
    }

    pub fn nprobe(&self) -> usize {
        self.nprobe
    }

    pub fn set_nprobe(&mut self, nprobe: usize) -> Result<()> {
        if nprobe == 0 || nprobe > self.nlist() {
            return Err(Error::config("nprobe must lie in [1, nlist]"));
        }
        self.nprobe = nprobe;
        Ok(())
    }

    pub fn centroids(&self) -> &Matrix<f32> {
        &self.centroids
    }

    pub fn lists(&self) -> &[Vec<u32>] {
        &self.lists
    }

    /// Checks that every database row sits in exactly one list.
    pub fn covers(&self, n_rows: usize) -> bool {
        let mut seen = alloc::vec![false; n_rows];
        for &id in self.lists.iter().flatten() {
            let id = id as usize;
            if id >= n_rows || seen[id] {
                return false;
            }
            seen[id] = true;
        }
        seen.into_iter().all(|s| s)
    }

    /// Up to `k` rows by exact inner product among the `nprobe` lists whose
    /// centroids are most similar to `query`; descending, ties to lower id.
    pub fn stage1_topk(&self, db: &FingerprintDb, query: &[f32], k: usize) -> Vec<(usize, f32)> {
        let mut order: Vec<(usize, f32)> = (0..self.nlist())
            .map(|c| (c, dot(self.centroids.row(c), query)))
            .collect();
        order.sort_by(|a, b| by_score_desc(a.1, b.1).then(a.0.cmp(&b.0)));
        let mut hits: Vec<(usize, f32)> = order[..self.nprobe]
            .iter()
            .flat_map(|&(c, _)| self.lists[c].iter())
            .map(|&id| (id as usize, dot(db.vectors().row(id as usize), query)))
            .collect();
        top_k(&mut hits, k);
        hits
    }
}

fn by_score_desc(a: f32, b: f32) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

fn top_k(hits: &mut Vec<(usize, f32)>, k: usize) {
    let cmp = |a: &(usize, f32), b: &(usize, f32)| by_score_desc(a.1, b.1).then(a.0.cmp(&b.0));
    if hits.len() > k && k > 0 {
        hits.select_nth_unstable_by(k - 1, cmp);
        hits.truncate(k);
    }
    hits.truncate(k);
    hits.sort_by(cmp);
}

fn kmeans_pp<R: Rng + ?Sized>(x: &Matrix<f32>, k: usize, rng: &mut R) -> Matrix<f32> {
    let n = x.rows();
    let mut centroids = Matrix::zeros(k, x.cols());
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).copy_from_slice(x.row(first));
    let mut d2: Vec<f64> = (0..n).map(|r| f64::from(sq_dist(x.row(r), x.row(first)))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (r, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = r;
                    break;
                }
                target -= d;
            }
            // Never land on a zero-weight row through rounding at the tail.
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&d| d > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(x.row(pick));
        for (r, d) in d2.iter_mut().enumerate() {
            *d = d.min(f64::from(sq_dist(x.row(r), x.row(pick))));
        }
    }
    centroids
}

fn assign_all(x: &Matrix<f32>, centroids: &Matrix<f32>) -> Vec<usize> {
    (0..x.rows())
        .map(|r| {
            let mut best = 0;
            let mut best_ip = f32::NEG_INFINITY;
            for c in 0..centroids.rows() {
                let ip = dot(centroids.row(c), x.row(r));
                if ip > best_ip {
                    best_ip = ip;
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchParams {
    /// Stage-1 candidates per query segment.
    pub k: usize,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self { k: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    /// Boundary index of the matched track.
    pub track: usize,
    pub db_start_index: usize,
    pub mean_similarity: f64,
}

/// Mean inner product between the query rows and `db[start ..]`, accumulated
/// in 64-bit.
pub fn window_score(db: &FingerprintDb, query: &Matrix<f32>, start: usize) -> f64 {
    let l = query.rows();
    let total: f64 = (0..l)
        .map(|i| {
            query
                .row(i)
                .iter()
                .zip(db.vectors().row(start + i))
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum::<f64>()
        })
        .sum();
    total / l as f64
}

/// Two-stage sequence search. Every stage-1 hit `c` for query position `i`
/// proposes the window starting at `c - i`; windows leaving the database or
/// crossing a track boundary are dropped, and each distinct start is scored
/// by [`window_score`]. Ranked descending, ties to the lower start.
pub fn sequence_search(
    index: &IvfIndex,
    db: &FingerprintDb,
    query: &Matrix<f32>,
    params: &SearchParams,
) -> Vec<CandidateScore> {
    let l = query.rows();
    if l == 0 {
        return Vec::new();
    }
    let mut starts = BTreeSet::new();
    for i in 0..l {
        for (c, _) in index.stage1_topk(db, query.row(i), params.k) {
            if c >= i && db.window_track(c - i, l).is_some() {
                starts.insert(c - i);
            }
        }
    }
    let mut out: Vec<CandidateScore> = starts
        .into_iter()
        .map(|s| CandidateScore {
            track: db.track_of(s).expect("start inside database"),
            db_start_index: s,
            mean_similarity: window_score(db, query, s),
        })
        .collect();
    out.sort_by(|a, b| {
        b.mean_similarity
            .partial_cmp(&a.mean_similarity)
            .unwrap_or(Ordering::Equal)
            .then(a.db_start_index.cmp(&b.db_start_index))
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::vec;

    fn random_unit_rows(seed: u64, rows: usize, dim: usize) -> Matrix<f32> {
        let mut rng = crate::seeded_rng(seed);
        let mut m = Matrix::zeros(rows, dim);
        for r in 0..rows {
            let row = m.row_mut(r);
            for v in row.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            normalize(row);
        }
        m
    }

    fn db_of(tracks: usize, segs: usize, dim: usize, seed: u64) -> FingerprintDb {
        FingerprintDb::build(
            (0..tracks).map(|t| (format!("t{t}"), random_unit_rows(seed + t as u64, segs, dim))),
            [0; 32],
        )
        .unwrap()
        .db
    }

    #[test]
    fn build_layout() {
        let db = db_of(3, 59, 8, 1);
        assert_eq!(db.len(), 177);
        assert_eq!(db.boundaries().len(), 3);
        assert_eq!(db.boundaries()[2].start_index, 118);
        // Scan oracle for the index -> track lookup.
        for i in 0..177 {
            let brute = db
                .boundaries()
                .iter()
                .position(|b| i >= b.start_index && i < b.start_index + b.n_segments);
            assert_eq!(db.track_of(i), brute);
        }
        assert_eq!(db.track_of(177), None);
        assert_eq!(db.window_track(57, 2), Some(0));
        assert_eq!(db.window_track(58, 2), None);
    }

    #[test]
    fn build_errors_and_renormalization() {
        let empty: Vec<(String, Matrix<f32>)> = Vec::new();
        assert!(FingerprintDb::build(empty, [0; 32]).is_err());
        let mixed = vec![
            (String::from("a"), random_unit_rows(1, 2, 4)),
            (String::from("b"), random_unit_rows(2, 2, 5)),
        ];
        assert!(FingerprintDb::build(mixed, [0; 32]).is_err());
        let mut off = random_unit_rows(3, 2, 4);
        for v in off.row_mut(1) {
            *v *= 2.0;
        }
        let built = FingerprintDb::build(vec![("a", off)], [0; 32]).unwrap();
        assert_eq!(built.renormalized, vec![1]);
        assert!((norm(built.db.vectors().row(1)) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn from_parts_rejects_gaps() {
        let v = random_unit_rows(1, 4, 3);
        let bad = vec![
            TrackBoundary {
                track_id: "a".into(),
                start_index: 0,
                n_segments: 2,
            },
            TrackBoundary {
                track_id: "b".into(),
                start_index: 3,
                n_segments: 1,
            },
        ];
        assert!(FingerprintDb::from_parts(v.clone(), bad, [0; 32]).is_err());
        let short = vec![TrackBoundary {
            track_id: "a".into(),
            start_index: 0,
            n_segments: 3,
        }];
        assert!(FingerprintDb::from_parts(v, short, [0; 32]).is_err());
    }

    #[test]
    fn ivf_structure() {
        let db = db_of(10, 20, 8, 3);
        let idx = IvfIndex::build(&db, 8, 2, 5).unwrap();
        assert!(idx.covers(db.len()));
        assert_eq!(idx, IvfIndex::build(&db, 8, 2, 5).unwrap());
        assert!(IvfIndex::build(&db, 0, 1, 5).is_err());
        assert!(IvfIndex::build(&db, 201, 1, 5).is_err());
        assert!(IvfIndex::build(&db, 8, 9, 5).is_err());
        let one = IvfIndex::build(&db, 1, 1, 5).unwrap();
        assert_eq!(one.lists()[0].len(), db.len());
    }

    #[test]
    fn duplicated_points_fill_every_cluster() {
        let base = random_unit_rows(9, 6, 5);
        let mut rows = Vec::new();
        for r in 0..6 {
            for _ in 0..6 {
                rows.push(base.row(r).to_vec());
            }
        }
        let m = Matrix::from_rows(&rows).unwrap();
        let db = FingerprintDb::build(vec![("a", m)], [0; 32]).unwrap().db;
        let idx = IvfIndex::build(&db, 6, 1, 11).unwrap();
        assert!(idx.lists().iter().all(|l| l.len() == 6));
    }

    #[test]
    fn exhaustive_probe_equals_brute_force() {
        let db = db_of(20, 30, 8, 7);
        let idx = IvfIndex::build(&db, 16, 16, 2).unwrap();
        let q = random_unit_rows(100, 1, 8);
        let got = idx.stage1_topk(&db, q.row(0), 20);
        let mut brute: Vec<(usize, f32)> = (0..db.len()).map(|i| (i, dot(db.vectors().row(i), q.row(0)))).collect();
        brute.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        brute.truncate(20);
        assert_eq!(got, brute);
        let own = idx.stage1_topk(&db, db.vectors().row(123), 5);
        assert_eq!(own[0].0, 123);
        assert!((own[0].1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn recall_does_not_drop_with_more_probes() {
        let db = db_of(100, 100, 16, 21);
        let idx = IvfIndex::build(&db, 64, 1, 4).unwrap();
        let queries = random_unit_rows(999, 50, 16);
        let mut last = 0.0;
        for nprobe in [1, 2, 4, 8, 16, 64] {
            let mut idx = idx.clone();
            idx.set_nprobe(nprobe).unwrap();
            let mut hit = 0usize;
            for q in queries.iter_rows() {
                let mut brute: Vec<(usize, f32)> = (0..db.len()).map(|i| (i, dot(db.vectors().row(i), q))).collect();
                top_k(&mut brute, 20);
                let got: BTreeSet<usize> = idx.stage1_topk(&db, q, 20).into_iter().map(|h| h.0).collect();
                hit += brute.iter().filter(|h| got.contains(&h.0)).count();
            }
            let recall = hit as f64 / (50.0 * 20.0);
            assert!(recall >= last, "recall fell to {recall} at nprobe {nprobe}");
            last = recall;
        }
        assert_eq!(last, 1.0);
    }

    #[test]
    fn sequence_search_cases() {
        let db = db_of(10, 12, 8, 31);
        let idx = IvfIndex::build(&db, 4, 4, 1).unwrap();
        let params = SearchParams::default();
        // Exact copy of rows [25, 29).
        let q = db.vectors().select_rows(&[25, 26, 27, 28]);
        let res = sequence_search(&idx, &db, &q, &params);
        assert_eq!(res[0].db_start_index, 25);
        assert_eq!(res[0].track, 2);
        assert!((res[0].mean_similarity - 1.0).abs() < 1e-6);
        for c in &res {
            assert!(db.window_track(c.db_start_index, 4).is_some());
        }
        // L = 1 degenerates to stage 1.
        let q1 = random_unit_rows(5, 1, 8);
        let seq: Vec<usize> = sequence_search(&idx, &db, &q1, &params)
            .iter()
            .map(|c| c.db_start_index)
            .collect();
        let st: Vec<usize> = idx.stage1_topk(&db, q1.row(0), 20).iter().map(|h| h.0).collect();
        assert_eq!(seq, st);
        assert!(sequence_search(&idx, &db, &Matrix::zeros(0, 8), &params).is_empty());
    }

    #[test]
    fn full_candidate_ranking_equals_exhaustive_oracle() {
        let db = db_of(6, 10, 6, 41);
        let idx = IvfIndex::build(&db, 4, 4, 3).unwrap();
        let params = SearchParams { k: db.len() };
        let mut rng = crate::seeded_rng(8);
        for l in [1usize, 3, 9] {
            for _ in 0..10 {
                let q = random_unit_rows(rng.gen(), l, 6);
                let got = sequence_search(&idx, &db, &q, &params);
                let mut brute: Vec<(usize, f64)> = (0..db.len())
                    .filter(|&s| db.window_track(s, l).is_some())
                    .map(|s| {
                        let sc: f64 = (0..l)
                            .map(|i| {
                                q.row(i)
                                    .iter()
                                    .zip(db.vectors().row(s + i))
                                    .map(|(a, b)| f64::from(*a) * f64::from(*b))
                                    .sum::<f64>()
                            })
                            .sum::<f64>()
                            / l as f64;
                        (s, sc)
                    })
                    .collect();
                brute.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
                let got_starts: Vec<usize> = got.iter().map(|c| c.db_start_index).collect();
                let brute_starts: Vec<usize> = brute.iter().map(|b| b.0).collect();
                assert_eq!(got_starts, brute_starts);
            }
        }
    }

    #[test]
    fn scores_do_not_depend_on_track_order() {
        let tracks: Vec<(String, Matrix<f32>)> = (0..5)
            .map(|t| (format!("t{t}"), random_unit_rows(50 + t, 8, 6)))
            .collect();
        let fwd = FingerprintDb::build(tracks.clone(), [0; 32]).unwrap().db;
        let rev = FingerprintDb::build(tracks.into_iter().rev(), [0; 32]).unwrap().db;
        let q = random_unit_rows(77, 3, 6);
        let p = SearchParams { k: 40 };
        let a = sequence_search(&IvfIndex::build(&fwd, 1, 1, 0).unwrap(), &fwd, &q, &p);
        let b = sequence_search(&IvfIndex::build(&rev, 1, 1, 0).unwrap(), &rev, &q, &p);
        let key = |db: &FingerprintDb, c: &CandidateScore| {
            let t = &db.boundaries()[c.track];
            (t.track_id.clone(), c.db_start_index - t.start_index)
        };
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(key(&fwd, x), key(&rev, y));
            assert!((x.mean_similarity - y.mean_similarity).abs() < 1e-12);
        }
    }
}
