use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// One line of `manifest.jsonl`.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    /// Input path to SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub started_unix: f64,
    pub wall_time_s: f64,
}

/// SHA-256 of a file, or of every file under a directory (names and
/// contents, in sorted order).
pub fn hash_path(path: &Path) -> std::io::Result<String> {
    let mut h = Sha256::new();
    hash_into(&mut h, path, Path::new(""))?;
    Ok(hex::encode(h.finalize()))
}

fn hash_into(h: &mut Sha256, path: &Path, rel: &Path) -> std::io::Result<()> {
    if path.is_dir() {
        let mut entries: Vec<_> = fs::read_dir(path)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            if e.file_name() == MANIFEST_FILE {
                continue;
            }
            hash_into(h, &e.path(), &rel.join(e.file_name()))?;
        }
    } else {
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(path)?);
    }
    Ok(())
}

/// Collects what a command read and produced, then appends the manifest.
pub struct Run {
    manifest: RunManifest,
    clock: Instant,
}

impl Run {
    pub fn start(command: &str) -> Self {
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
        Self {
            manifest: RunManifest {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION"),
                seed: None,
                config: serde_json::Value::Null,
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
                started_unix: started,
                wall_time_s: 0.0,
            },
            clock: Instant::now(),
        }
    }

    /// Records the effective configuration and echoes it to stderr.
    pub fn config(&mut self, config: serde_json::Value, seed: Option<u64>) {
        eprintln!(
            "effective config: {}",
            serde_json::to_string_pretty(&config).unwrap_or_default()
        );
        self.manifest.config = config;
        self.manifest.seed = seed;
    }

    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        let digest = hash_path(path).with_context(|| format!("reading {}", path.display()))?;
        self.manifest.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn input_bytes(&mut self, path: &Path, bytes: &[u8]) {
        self.manifest
            .inputs
            .insert(path.display().to_string(), hex::encode(Sha256::digest(bytes)));
    }

    pub fn output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.display().to_string());
    }

    /// Appends the manifest line to `dir/manifest.jsonl`.
    pub fn finish(mut self, dir: &Path) -> std::io::Result<()> {
        self.manifest.wall_time_s = self.clock.elapsed().as_secs_f64();
        fs::create_dir_all(dir)?;
        let mut f = OpenOptions::new().create(true).append(true).open(dir.join(MANIFEST_FILE))?;
        let line = serde_json::to_string(&self.manifest).map_err(std::io::Error::other)?;
        writeln!(f, "{line}")
    }
}

/// Directory that receives the manifest of a command writing `file`.
pub fn dir_of(file: &Path) -> &Path {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}
