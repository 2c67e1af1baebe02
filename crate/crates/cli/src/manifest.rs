// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run manifests and atomic output files.

use std::io::Write;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct Artifact {
    pub file: String,
    pub sha256: String,
}

/// Provenance of one command invocation.
///
/// `run_id` hashes the fields that determine the results (command, config,
/// seed, bridge, engine version); clock and cache counters are left out.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub bridge: String,
    pub engine_version: String,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub artifacts: Vec<Artifact>,
}

pub struct ManifestClock {
    started_unix: u64,
    started: Instant,
}

impl ManifestClock {
    pub fn start() -> Self {
        Self {
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            started: Instant::now(),
        }
    }

    pub fn finish(
        &self,
        command: &str,
        config: serde_json::Value,
        seed: u64,
        bridge: String,
        (cache_hits, cache_misses): (u64, u64),
    ) -> RunManifest {
        let identity = serde_json::json!({
            "command": command,
            "config": config,
            "seed": seed,
            "bridge": bridge,
            "engine_version": ENGINE_VERSION,
        });
        let run_id = sha256_hex(identity.to_string().as_bytes())[..16].to_string();
        RunManifest {
            run_id,
            command: command.to_string(),
            config,
            seed,
            bridge,
            engine_version: ENGINE_VERSION.to_string(),
            started_unix: self.started_unix,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            cache_hits,
            cache_misses,
            artifacts: Vec::new(),
        }
    }
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn record(&mut self, file: &Path, contents: &[u8]) {
        self.artifacts.push(Artifact {
            file: file
                .file_name()
                .map_or_else(|| file.display().to_string(), |n| n.to_string_lossy().into_owned()),
            sha256: sha256_hex(contents),
        });
    }
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
