//! Per-run manifest: what went in, what came out, and how long it took.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub inputs: Vec<InputDigest>,
    pub seeds: Vec<u64>,
    pub started_unix: u64,
    pub duration_secs: f64,
    pub outputs: Vec<PathBuf>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).with_context(|| format!("reading {}", path.display()))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Collects manifest fields while a subcommand runs.
pub struct Run {
    manifest: RunManifest,
    clock: Instant,
}

impl Run {
    pub fn start(subcommand: &str) -> Self {
        let started_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Run {
            manifest: RunManifest {
                subcommand: subcommand.to_string(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                config: serde_json::Value::Null,
                config_hash: None,
                inputs: Vec::new(),
                seeds: Vec::new(),
                started_unix,
                duration_secs: 0.0,
                outputs: Vec::new(),
            },
            clock: Instant::now(),
        }
    }

    pub fn config<T: Serialize>(&mut self, config: &T) -> Result<()> {
        self.manifest.config = serde_json::to_value(config)?;
        Ok(())
    }

    pub fn config_hash(&mut self, hash: &str) {
        self.manifest.config_hash = Some(hash.to_string());
    }

    pub fn seeds(&mut self, seeds: &[u64]) {
        self.manifest.seeds = seeds.to_vec();
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let sha256 = sha256_file(path)?;
        self.manifest.inputs.push(InputDigest {
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.manifest.outputs.push(path.into());
    }

    /// Writes `manifest.json` into `out_dir`.
    pub fn finish(mut self, out_dir: &Path) -> Result<RunManifest> {
        self.manifest.duration_secs = self.clock.elapsed().as_secs_f64();
        let path = out_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(self.manifest)
    }
}
