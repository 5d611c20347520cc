//! Result tables with provenance sidecars, and an on-disk embedding cache.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Provenance written next to every result table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the canonical experiment configuration text.
    pub config_hash: String,
    pub seed: u64,
    /// Checkpoint name to content hash.
    pub checkpoints: BTreeMap<String, String>,
}

impl Provenance {
    pub fn new(config_text: &str, seed: u64) -> Self {
        Provenance {
            config_hash: hex::encode(Sha256::digest(config_text.as_bytes())),
            seed,
            checkpoints: BTreeMap::new(),
        }
    }

    pub fn with_checkpoint(mut self, name: &str, hash: &str) -> Self {
        self.checkpoints.insert(name.to_string(), hash.to_string());
        self
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// Writes `contents` to `path` and the provenance to `<path>.json`.
pub fn write_with_provenance(path: &Path, contents: &str, prov: &Provenance) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    let json = serde_json::to_string_pretty(prov).map_err(|e| Error::invalid(e.to_string()))?;
    fs::write(sidecar_path(path), json)?;
    Ok(())
}

pub fn read_provenance(path: &Path) -> Result<Provenance> {
    let text = fs::read_to_string(sidecar_path(path))?;
    serde_json::from_str(&text).map_err(|e| Error::invalid(format!("provenance: {e}")))
}

/// Embeddings computed by one checkpoint for one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingCache {
    pub checkpoint_hash: String,
    pub dataset: String,
    pub modality: String,
    pub rows: Vec<Vec<f64>>,
}

impl EmbeddingCache {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let json = serde_json::to_string(self).map_err(|e| Error::invalid(e.to_string()))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("embedding cache: {e}")))
    }

    /// Loads the cache only if it was produced by `checkpoint_hash`.
    pub fn load_matching(path: &Path, checkpoint_hash: &str) -> Result<Option<Self>> {
        if !path.exists() {
            return Ok(None);
        }
        let c = Self::load(path)?;
        Ok((c.checkpoint_hash == checkpoint_hash).then_some(c))
    }
}
