//! Run configuration: one JSON document for every pipeline stage. Only
//! `seed` is mandatory; it seeds training, index building and query
//! generation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use nmfp_core::degrade::DegradationRanges;
use nmfp_core::eval::QuerySpec;
use nmfp_core::features::FeatureConfig;
use nmfp_core::index::SearchParams;
use nmfp_core::train::TrainConfig;

use crate::error::{IoError, IoResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexConfig {
    pub nlist: usize,
    pub nprobe: usize,
    /// Stage-1 candidates per query segment.
    pub k: usize,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            nlist: 256,
            nprobe: 32,
            k: SearchParams::default().k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub feature: FeatureConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub index: IndexConfig,
    #[serde(default)]
    pub query: QuerySpec,
    #[serde(default)]
    pub degradation: DegradationRanges,
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            feature: FeatureConfig::default(),
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            index: IndexConfig::default(),
            query: QuerySpec::default(),
            degradation: DegradationRanges::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        cfg.train.seed = cfg.seed;
        cfg.train.ranges = cfg.degradation.clone();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> IoResult<Result<Self, String>> {
        let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
        Ok(Self::from_json(&text).map_err(|e| format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), String> {
        self.feature.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        self.degradation.validate().map_err(|e| e.to_string())?;
        self.query
            .validate(&self.feature.segment, self.feature.mel.sample_rate)
            .map_err(|e| e.to_string())?;
        if self.index.nlist == 0 || self.index.nprobe == 0 || self.index.nprobe > self.index.nlist || self.index.k == 0
        {
            return Err("index needs 1 <= nprobe <= nlist and k >= 1".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
