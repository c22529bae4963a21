//! Degradation asset manifests: a JSON array of
//! `{id, path, source_id, kind, split}` entries, paths relative to the
//! manifest. Audio is brought to the working rate on load.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use nmfp_core::degrade::{validate_partition, AssetKind, AssetStore, ImpulseResponse, Split};

use crate::error::{IoError, IoResult};
use crate::wav::read_working;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub source_id: String,
    pub kind: AssetKind,
    pub split: Split,
}

pub fn read_manifest(path: &Path) -> IoResult<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| IoError::json(path, e))
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> IoResult<()> {
    let text = serde_json::to_string_pretty(entries).expect("manifest serializes");
    std::fs::write(path, text).map_err(|e| IoError::io(path, e))
}

/// Loads every asset of the manifest and rejects it when a source appears
/// in both splits.
pub fn load_assets(manifest: &Path) -> IoResult<AssetStore> {
    let entries = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut store = AssetStore::new();
    for e in &entries {
        let p = base.join(&e.path);
        let audio = read_working(&p)?;
        match e.kind {
            AssetKind::Noise => store.insert_noise(e.id.clone(), audio, e.source_id.clone(), e.split),
            kind => {
                let rate = audio.sample_rate();
                let ir = ImpulseResponse::new(audio.into_samples(), rate, kind, e.source_id.clone())
                    .map_err(|err| IoError::core(&p, err))?;
                store.insert_ir(e.id.clone(), ir, e.split);
            }
        }
    }
    let violations = validate_partition(&store.manifest());
    if !violations.is_empty() {
        return Err(IoError::core(
            manifest,
            nmfp_core::Error::Config(format!("train/test leakage: {}", violations.join(", "))),
        ));
    }
    Ok(store)
}
