use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{to_map, Derivations, RunConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NfeStats {
    pub runs: usize,
    pub total: usize,
    pub mean: f64,
    pub min: usize,
    pub max: usize,
}

impl NfeStats {
    pub fn from_counts(counts: &[usize]) -> Option<Self> {
        if counts.is_empty() {
            return None;
        }
        let total: usize = counts.iter().sum();
        Some(Self {
            runs: counts.len(),
            total,
            mean: total as f64 / counts.len() as f64,
            min: *counts.iter().min()?,
            max: *counts.iter().max()?,
        })
    }
}

/// Self-description written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config: BTreeMap<String, serde_json::Value>,
    pub config_sha256: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub wall_time_s: f64,
    pub nfe: Option<NfeStats>,
    pub derivations: Option<Derivations>,
    pub outputs: Vec<String>,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// Hex SHA-256 of the canonical (key-sorted, compact) JSON of the config.
/// The output directory is left out: it does not affect results.
pub fn config_hash(cfg: &RunConfig) -> String {
    let mut map = to_map(cfg);
    map.remove("out");
    let canonical = serde_json::to_string(&map).unwrap_or_default();
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub struct ManifestBuilder {
    command: String,
    started: Instant,
    pub nfe: Vec<usize>,
    pub derivations: Option<Derivations>,
    pub outputs: Vec<String>,
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl ManifestBuilder {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.into(),
            started: Instant::now(),
            nfe: Vec::new(),
            derivations: None,
            outputs: Vec::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn output(&mut self, name: &str) {
        self.outputs.push(name.into());
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        if let Ok(v) = serde_json::to_value(value) {
            self.extra.insert(key.into(), v);
        }
    }

    pub fn finish(self, cfg: &RunConfig) -> Manifest {
        let versions = BTreeMap::from([
            ("pfgm".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("pfgm-core".to_string(), pfgm_core::VERSION.to_string()),
        ]);
        Manifest {
            command: self.command,
            config: to_map(cfg),
            config_sha256: config_hash(cfg),
            seed: cfg.seed,
            versions,
            wall_time_s: self.started.elapsed().as_secs_f64(),
            nfe: NfeStats::from_counts(&self.nfe),
            derivations: self.derivations,
            outputs: self.outputs,
            extra: self.extra,
        }
    }
}
