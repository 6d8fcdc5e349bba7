//! `run.json`: what produced an artifact directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub command: Vec<String>,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub version: String,
    pub wall_time_secs: f64,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_lambda: Option<f64>,
}

/// Hex SHA-256 of the canonical JSON form of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let text = serde_json::to_string(config).expect("config serializes");
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Run {
    started: Instant,
    config_hash: String,
    seed: Option<u64>,
    pub best_lambda: Option<f64>,
}

impl Run {
    pub fn start<T: Serialize>(config: &T, seed: Option<u64>) -> Self {
        Run { started: Instant::now(), config_hash: config_hash(config), seed, best_lambda: None }
    }

    /// Writes `run.json` into `out`, listing `outputs` relative to it.
    pub fn finish(self, out: &Path, outputs: &[PathBuf]) -> voxelfit::Result<()> {
        let record = RunRecord {
            command: std::env::args().collect(),
            config_hash: self.config_hash,
            seed: self.seed,
            version: env!("VOXELFIT_DESCRIBE").to_string(),
            wall_time_secs: self.started.elapsed().as_secs_f64(),
            outputs: outputs
                .iter()
                .map(|p| p.strip_prefix(out).unwrap_or(p).display().to_string())
                .collect(),
            best_lambda: self.best_lambda,
        };
        let path = out.join("run.json");
        log::info!("{} outputs written to {} in {:.2}s", record.outputs.len(), out.display(), record.wall_time_secs);
        let text = serde_json::to_string_pretty(&record).expect("record serializes");
        fs::write(&path, text + "\n").map_err(|e| voxelfit::Error::Io { path, source: e })
    }
}
