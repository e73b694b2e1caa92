//! Run manifest: config hash, stage timings and a checksummed inventory of
//! everything under the output directory.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::files::{read, read_json, relative, write_json};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    /// Wall-clock seconds of the latest run of each stage.
    pub timings: BTreeMap<String, f64>,
    /// Relative path to SHA-256 of every file except this manifest.
    pub files: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load_or_default(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST_FILE);
        if path.exists() {
            read_json(&path)
        } else {
            Ok(Self::default())
        }
    }

    /// Rehash the inventory and write atomically.
    pub fn finish(mut self, dir: &Path, config_hash: &str, seed: u64) -> CliResult<Self> {
        self.tool = env!("CARGO_PKG_NAME").into();
        self.version = env!("CARGO_PKG_VERSION").into();
        self.config_hash = config_hash.into();
        self.seed = seed;
        self.files = inventory(dir)?;
        write_json(&dir.join(MANIFEST_FILE), &self)?;
        Ok(self)
    }

    /// Files whose current checksum differs from the recorded one.
    pub fn verify(&self, dir: &Path) -> CliResult<Vec<String>> {
        let now = inventory(dir)?;
        let mut bad: Vec<String> = self
            .files
            .iter()
            .filter(|(p, h)| now.get(*p) != Some(*h))
            .map(|(p, _)| p.clone())
            .collect();
        bad.extend(now.keys().filter(|p| !self.files.contains_key(*p)).cloned());
        Ok(bad)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn inventory(dir: &Path) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(|e| CliError::io(&d, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| CliError::io(&d, e))?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = relative(dir, &path);
            if rel == MANIFEST_FILE || rel.contains("/.tmp") || rel.starts_with(".tmp") {
                continue;
            }
            out.insert(rel, sha256_hex(&read(&path)?));
        }
    }
    Ok(out)
}
