//! The record written next to every run's artifacts.

use std::path::Path;

use emkd_core::data::DatasetStats;
use emkd_core::EmkdError;
use serde::{Deserialize, Serialize};

use crate::settings::RunConfig;
use crate::staging::write_atomic;
use crate::{Result, VERSION};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: Vec<String>,
    pub config: RunConfig,
    /// Per-network initialization seeds.
    pub seeds: Vec<u64>,
    pub dataset_fingerprint: String,
    pub dataset_stats: DatasetStats,
}

impl RunManifest {
    pub fn new(
        command: Vec<String>,
        config: RunConfig,
        dataset_fingerprint: String,
        dataset_stats: DatasetStats,
    ) -> Self {
        let seeds = config.train.seeds_for(config.model.n_networks);
        Self {
            tool: "emkd".into(),
            version: VERSION.into(),
            command,
            config,
            seeds,
            dataset_fingerprint,
            dataset_stats,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| EmkdError::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}
