//! Pipeline stages over files and in-memory corpora. Work is spread over the
//! rayon pool; every result is collected in input order, so outputs do not
//! depend on the thread count.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use nmfp_core::encoder::EncoderParams;
use nmfp_core::eval::{evaluate_chunk, make_query, score, EvalReport, GroundTruth, QueryDegradation, QuerySpec};
use nmfp_core::features::{FeatureConfig, MelExtractor};
use nmfp_core::index::{BuiltDb, FingerprintDb, IvfIndex, SearchParams, TrackBoundary};
use nmfp_core::train::{StepReport, Trainer};
use nmfp_core::{AudioBuffer, Matrix};

use crate::error::{FormatError, IoError, IoResult};
use crate::formats::{sidecar_path, FingerprintFile};
use crate::wav::read_working;

/// `.wav` files directly inside `dir`, sorted by name.
pub fn list_wavs(dir: &Path) -> IoResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| IoError::io(dir, e))? {
        let p = entry.map_err(|e| IoError::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Tracks named by file stem, at the working rate.
pub fn load_tracks(paths: &[PathBuf]) -> IoResult<Vec<(String, AudioBuffer)>> {
    paths
        .par_iter()
        .map(|p| {
            let id = p
                .file_stem()
                .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
            Ok((id, read_working(p)?))
        })
        .collect()
}

/// Fingerprints of every grid segment of one track.
pub fn fingerprint_track(
    params: &EncoderParams<f32>,
    extractor: &MelExtractor,
    feature: &FeatureConfig,
    audio: &AudioBuffer,
) -> nmfp_core::Result<Matrix<f32>> {
    let feats = extractor.track_features(audio, &feature.segment)?;
    params.forward(&feats)
}

/// Fingerprints a corpus into a database in track order.
pub fn extract_db(
    params: &EncoderParams<f32>,
    feature: &FeatureConfig,
    tracks: &[(String, AudioBuffer)],
) -> nmfp_core::Result<BuiltDb> {
    let extractor = MelExtractor::new(feature.mel.clone())?;
    let fps = tracks
        .par_iter()
        .map(|(id, audio)| Ok((id.clone(), fingerprint_track(params, &extractor, feature, audio)?)))
        .collect::<nmfp_core::Result<Vec<_>>>()?;
    FingerprintDb::build(fps, feature.digest())
}

/// One optimizer step with batch rows produced on the rayon pool (or
/// sequentially when `parallel` is false).
pub fn train_step(trainer: &mut Trainer<'_>, parallel: bool) -> nmfp_core::Result<StepReport> {
    let plan = trainer.next_plan()?;
    let inputs = if parallel {
        let t = &*trainer;
        let rows = (0..plan.total_samples())
            .into_par_iter()
            .map(|r| t.row_input(&plan, r))
            .collect::<nmfp_core::Result<Vec<_>>>()?;
        Matrix::from_rows(&rows)?
    } else {
        trainer.batch_inputs(&plan)?
    };
    trainer.apply(&plan, &inputs)
}

/// Query chunks fingerprinted as one file (each chunk a "track" named after
/// its source) with ground truth in chunk order.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub fingerprints: FingerprintFile,
    pub boundaries: Vec<TrackBoundary>,
    pub truth: Vec<GroundTruth>,
}

pub const QUERY_FP_NAME: &str = "fingerprints.nmfp";
pub const QUERY_TRUTH_NAME: &str = "truth.json";

pub fn make_query_set(
    params: &EncoderParams<f32>,
    feature: &FeatureConfig,
    tracks: &[(String, AudioBuffer)],
    degradation: Option<QueryDegradation<'_>>,
    spec: &QuerySpec,
    seed: u64,
) -> nmfp_core::Result<(QuerySet, Vec<AudioBuffer>)> {
    let extractor = MelExtractor::new(feature.mel.clone())?;
    let chunks = tracks
        .par_iter()
        .enumerate()
        .map(|(i, (id, audio))| {
            let q = make_query(id, audio, degradation, spec, &feature.segment, seed, i as u64)?;
            let fps = fingerprint_track(params, &extractor, feature, &q.audio)?;
            Ok((q, fps))
        })
        .collect::<nmfp_core::Result<Vec<_>>>()?;
    let built = FingerprintDb::build(
        chunks.iter().map(|(q, fps)| (q.truth.track_id.clone(), fps.clone())),
        feature.digest(),
    )?;
    let set = QuerySet {
        fingerprints: FingerprintFile {
            feature_json: feature.to_json(),
            vectors: built.db.vectors().clone(),
        },
        boundaries: built.db.boundaries().to_vec(),
        truth: chunks.iter().map(|(q, _)| q.truth.clone()).collect(),
    };
    Ok((set, chunks.into_iter().map(|(q, _)| q.audio).collect()))
}

impl QuerySet {
    pub fn write(&self, dir: &Path) -> IoResult<()> {
        std::fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
        let fp = dir.join(QUERY_FP_NAME);
        self.fingerprints.write(&fp)?;
        crate::formats::write_boundaries(&sidecar_path(&fp), &self.boundaries)?;
        let truth = dir.join(QUERY_TRUTH_NAME);
        let text = serde_json::to_string_pretty(&self.truth).expect("truth serializes");
        std::fs::write(&truth, text).map_err(|e| IoError::io(&truth, e))
    }

    pub fn read(dir: &Path) -> IoResult<Self> {
        let fp = dir.join(QUERY_FP_NAME);
        let fingerprints = FingerprintFile::read(&fp)?;
        let boundaries = crate::formats::read_boundaries(&sidecar_path(&fp))?;
        let truth_path = dir.join(QUERY_TRUTH_NAME);
        let text = std::fs::read_to_string(&truth_path).map_err(|e| IoError::io(&truth_path, e))?;
        let truth: Vec<GroundTruth> = serde_json::from_str(&text).map_err(|e| IoError::json(&truth_path, e))?;
        if truth.len() != boundaries.len() {
            return Err(IoError::format(
                &truth_path,
                FormatError::Corrupt(format!("{} truth entries for {} chunks", truth.len(), boundaries.len())),
            ));
        }
        Ok(Self {
            fingerprints,
            boundaries,
            truth,
        })
    }

    /// Fingerprints of chunk `i`.
    pub fn chunk(&self, i: usize) -> Matrix<f32> {
        let b = &self.boundaries[i];
        let idx: Vec<usize> = (b.start_index..b.start_index + b.n_segments).collect();
        self.fingerprints.vectors.select_rows(&idx)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("feature digest mismatch: database {db}, queries {queries}")]
    DigestMismatch { db: String, queries: String },
    #[error(transparent)]
    Core(#[from] nmfp_core::Error),
}

/// Scores a query set against a database. Refuses to run when the query
/// features were extracted with a different configuration.
pub fn evaluate(
    index: &IvfIndex,
    db: &FingerprintDb,
    queries: &QuerySet,
    spec: &QuerySpec,
    feature: &FeatureConfig,
    params: &SearchParams,
) -> Result<EvalReport, EvalError> {
    let qd = queries.fingerprints.digest();
    if qd != *db.digest() {
        return Err(EvalError::DigestMismatch {
            db: crate::formats::digest_hex(db.digest()),
            queries: crate::formats::digest_hex(&qd),
        });
    }
    let results = (0..queries.truth.len())
        .into_par_iter()
        .map(|i| evaluate_chunk(index, db, &queries.chunk(i), &queries.truth[i], spec, params))
        .collect::<nmfp_core::Result<Vec<_>>>()?;
    let flat: Vec<_> = results.into_iter().flatten().collect();
    Ok(score(&flat, spec, &feature.segment))
}
