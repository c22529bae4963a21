//! Binary file formats. All integers and floats are little-endian.
//!
//! Fingerprint file (`.nmfp`):
//! `"NMFP" | version u16 | dim u32 | count u64 | digest [32] | json_len u32 |
//! feature JSON | zero padding to an 8-byte boundary | count x dim f32`.
//! The digest is the SHA-256 of the feature JSON. Rows start aligned so the
//! matrix can be mapped in place.
//!
//! Index file: `"NMIV" | version u16 | reserved u16 | dim u32 | nlist u32 |
//! nprobe u32 | count u64 | db digest [32] | centroids nlist x dim f32 |
//! list offsets (nlist + 1) u64 | ids count u32`.
//!
//! Checkpoint: `"NMCK" | version u16 | header_len u32 | header JSON |
//! parameters f32` (layer order, weight row-major then bias).
//!
//! Boundary sidecar: CSV with header `track_id,start_index,n_segments`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use nmfp_core::encoder::{EncoderArch, EncoderParams};
use nmfp_core::features::{digest_json, ConfigDigest, FeatureConfig};
use nmfp_core::index::{FingerprintDb, IvfIndex, TrackBoundary};
use nmfp_core::train::TrainConfig;
use nmfp_core::Matrix;

use crate::error::{FormatError, IoError, IoResult};

pub const FINGERPRINT_MAGIC: &[u8; 4] = b"NMFP";
pub const INDEX_MAGIC: &[u8; 4] = b"NMIV";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NMCK";
pub const VERSION: u16 = 1;

type FResult<T> = Result<T, FormatError>;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> FResult<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated)?;
        let out = self.buf.get(self.pos..end).ok_or(FormatError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn magic(&mut self, m: &'static [u8; 4]) -> FResult<()> {
        if self.take(4)? != m {
            return Err(FormatError::BadMagic {
                expected: std::str::from_utf8(m).unwrap_or("?"),
            });
        }
        Ok(())
    }

    fn u16(&mut self) -> FResult<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> FResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> FResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> FResult<usize> {
        usize::try_from(self.u64()?).map_err(|_| FormatError::Corrupt("count exceeds address space".into()))
    }

    fn digest(&mut self) -> FResult<ConfigDigest> {
        Ok(self.take(32)?.try_into().expect("32 bytes"))
    }

    fn f32s(&mut self, n: usize) -> FResult<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or(FormatError::Truncated)?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn version(&mut self) -> FResult<()> {
        match self.u16()? {
            VERSION => Ok(()),
            v => Err(FormatError::Version(v)),
        }
    }

    fn finish(self) -> FResult<()> {
        if self.pos != self.buf.len() {
            return Err(FormatError::Corrupt(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    out.reserve(xs.len() * 4);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn padding(pos: usize) -> usize {
    (8 - pos % 8) % 8
}

pub fn digest_hex(d: &ConfigDigest) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// Fingerprint matrix plus the feature configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintFile {
    /// Feature configuration JSON, kept verbatim.
    pub feature_json: String,
    pub vectors: Matrix<f32>,
}

impl FingerprintFile {
    pub fn new(feature: &FeatureConfig, vectors: Matrix<f32>) -> Self {
        Self {
            feature_json: feature.to_json(),
            vectors,
        }
    }

    pub fn digest(&self) -> ConfigDigest {
        digest_json(self.feature_json.as_bytes())
    }

    pub fn feature(&self) -> FResult<FeatureConfig> {
        Ok(serde_json::from_str(&self.feature_json)?)
    }

    pub fn encode(&self) -> Vec<u8> {
        let m = &self.vectors;
        let mut out = Vec::with_capacity(64 + self.feature_json.len() + m.as_slice().len() * 4);
        out.extend_from_slice(FINGERPRINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&self.digest());
        out.extend_from_slice(&(self.feature_json.len() as u32).to_le_bytes());
        out.extend_from_slice(self.feature_json.as_bytes());
        out.resize(out.len() + padding(out.len()), 0);
        put_f32s(&mut out, m.as_slice());
        out
    }

    pub fn decode(bytes: &[u8]) -> FResult<Self> {
        let mut r = Reader::new(bytes);
        r.magic(FINGERPRINT_MAGIC)?;
        r.version()?;
        let dim = r.u32()? as usize;
        let count = r.usize()?;
        let digest = r.digest()?;
        let json_len = r.u32()? as usize;
        let json = std::str::from_utf8(r.take(json_len)?)
            .map_err(|_| FormatError::Corrupt("feature JSON is not UTF-8".into()))?
            .to_owned();
        if digest_json(json.as_bytes()) != digest {
            return Err(FormatError::Corrupt(
                "digest does not match the embedded feature JSON".into(),
            ));
        }
        if r.take(padding(r.pos))?.iter().any(|&b| b != 0) {
            return Err(FormatError::Corrupt("non-zero padding".into()));
        }
        let data = r.f32s(count.checked_mul(dim).ok_or(FormatError::Truncated)?)?;
        r.finish()?;
        Ok(Self {
            feature_json: json,
            vectors: Matrix::from_vec(count, dim, data)?,
        })
    }

    pub fn write(&self, path: &Path) -> IoResult<()> {
        std::fs::write(path, self.encode()).map_err(|e| IoError::io(path, e))
    }

    pub fn read(path: &Path) -> IoResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
        Self::decode(&bytes).map_err(|e| IoError::format(path, e))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BoundaryRow {
    track_id: String,
    start_index: usize,
    n_segments: usize,
}

pub fn encode_boundaries(bounds: &[TrackBoundary]) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for b in bounds {
        w.serialize(BoundaryRow {
            track_id: b.track_id.clone(),
            start_index: b.start_index,
            n_segments: b.n_segments,
        })?;
    }
    w.into_inner().map_err(|e| e.into_error().into())
}

pub fn decode_boundaries(bytes: &[u8]) -> Result<Vec<TrackBoundary>, csv::Error> {
    csv::Reader::from_reader(bytes)
        .deserialize::<BoundaryRow>()
        .map(|r| {
            r.map(|b| TrackBoundary {
                track_id: b.track_id,
                start_index: b.start_index,
                n_segments: b.n_segments,
            })
        })
        .collect()
}

/// Sidecar path next to a fingerprint file: `x.nmfp` -> `x.csv`.
pub fn sidecar_path(fp_path: &Path) -> std::path::PathBuf {
    fp_path.with_extension("csv")
}

pub fn write_boundaries(path: &Path, bounds: &[TrackBoundary]) -> IoResult<()> {
    let bytes = encode_boundaries(bounds).map_err(|e| IoError::csv(path, e))?;
    std::fs::write(path, bytes).map_err(|e| IoError::io(path, e))
}

pub fn read_boundaries(path: &Path) -> IoResult<Vec<TrackBoundary>> {
    let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
    decode_boundaries(&bytes).map_err(|e| IoError::csv(path, e))
}

/// Writes `fp_path` and its boundary sidecar.
pub fn write_db(fp_path: &Path, db: &FingerprintDb, feature_json: &str) -> IoResult<()> {
    let file = FingerprintFile {
        feature_json: feature_json.to_owned(),
        vectors: db.vectors().clone(),
    };
    if file.digest() != *db.digest() {
        return Err(IoError::format(
            fp_path,
            FormatError::Corrupt("feature JSON does not match the database digest".into()),
        ));
    }
    file.write(fp_path)?;
    write_boundaries(&sidecar_path(fp_path), db.boundaries())
}

/// Reads a fingerprint file and its sidecar into a database; also returns the
/// feature configuration.
pub fn read_db(fp_path: &Path) -> IoResult<(FingerprintDb, FeatureConfig)> {
    let file = FingerprintFile::read(fp_path)?;
    let feature = file.feature().map_err(|e| IoError::format(fp_path, e))?;
    let bounds = read_boundaries(&sidecar_path(fp_path))?;
    let digest = file.digest();
    let db = FingerprintDb::from_parts(file.vectors, bounds, digest).map_err(|e| IoError::core(fp_path, e))?;
    Ok((db, feature))
}

/// IVF index bound to the database it was built over.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexFile {
    pub db_digest: ConfigDigest,
    pub db_count: usize,
    pub index: IvfIndex,
}

impl IndexFile {
    pub fn encode(&self) -> Vec<u8> {
        let c = self.index.centroids();
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(c.cols() as u32).to_le_bytes());
        out.extend_from_slice(&(self.index.nlist() as u32).to_le_bytes());
        out.extend_from_slice(&(self.index.nprobe() as u32).to_le_bytes());
        out.extend_from_slice(&(self.db_count as u64).to_le_bytes());
        out.extend_from_slice(&self.db_digest);
        put_f32s(&mut out, c.as_slice());
        let mut offset = 0u64;
        out.extend_from_slice(&offset.to_le_bytes());
        for l in self.index.lists() {
            offset += l.len() as u64;
            out.extend_from_slice(&offset.to_le_bytes());
        }
        for id in self.index.lists().iter().flatten() {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> FResult<Self> {
        let mut r = Reader::new(bytes);
        r.magic(INDEX_MAGIC)?;
        r.version()?;
        if r.u16()? != 0 {
            return Err(FormatError::Corrupt("reserved field set".into()));
        }
        let dim = r.u32()? as usize;
        let nlist = r.u32()? as usize;
        let nprobe = r.u32()? as usize;
        let count = r.usize()?;
        let db_digest = r.digest()?;
        let centroids = Matrix::from_vec(
            nlist,
            dim,
            r.f32s(nlist.checked_mul(dim).ok_or(FormatError::Truncated)?)?,
        )?;
        let offsets = (0..=nlist).map(|_| r.usize()).collect::<FResult<Vec<_>>>()?;
        if offsets[0] != 0 || offsets.windows(2).any(|w| w[0] > w[1]) || offsets[nlist] != count {
            return Err(FormatError::Corrupt("inconsistent list offsets".into()));
        }
        let ids = (0..count).map(|_| r.u32()).collect::<FResult<Vec<_>>>()?;
        r.finish()?;
        let lists = offsets.windows(2).map(|w| ids[w[0]..w[1]].to_vec()).collect();
        let index = IvfIndex::from_parts(centroids, lists, nprobe)?;
        if !index.covers(count) {
            return Err(FormatError::Corrupt(
                "inverted lists do not partition the database".into(),
            ));
        }
        Ok(Self {
            db_digest,
            db_count: count,
            index,
        })
    }

    /// Checks that this index was built over `db`.
    pub fn matches(&self, db: &FingerprintDb) -> bool {
        self.db_count == db.len() && self.db_digest == *db.digest() && self.index.centroids().cols() == db.dim()
    }

    pub fn write(&self, path: &Path) -> IoResult<()> {
        std::fs::write(path, self.encode()).map_err(|e| IoError::io(path, e))
    }

    pub fn read(path: &Path) -> IoResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
        Self::decode(&bytes).map_err(|e| IoError::format(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: EncoderArch,
    pub feature: FeatureConfig,
    pub train: TrainConfig,
    pub seed: u64,
    /// Optimizer steps taken.
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: EncoderParams<f32>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_string(&self.header).expect("header serializes");
        let flat = self.params.to_flat();
        let mut out = Vec::with_capacity(10 + header.len() + flat.len() * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        put_f32s(&mut out, &flat);
        out
    }

    pub fn decode(bytes: &[u8]) -> FResult<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version()?;
        let len = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(len)?)?;
        header.arch.validate()?;
        let flat = r.f32s(header.arch.n_params())?;
        r.finish()?;
        let params = EncoderParams::from_flat(header.arch.clone(), &flat)?;
        Ok(Self { header, params })
    }

    pub fn write(&self, path: &Path) -> IoResult<()> {
        // Write-then-rename so an interrupted run never leaves a torn checkpoint.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).map_err(|e| IoError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| IoError::io(path, e))
    }

    pub fn read(path: &Path) -> IoResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
        Self::decode(&bytes).map_err(|e| IoError::format(path, e))
    }
}
