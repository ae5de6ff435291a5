//! The `manifest.json` written into every run directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: &'static str,
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    /// Resolved configs, by name, in their file format.
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<InputRecord>,
    /// Hash over all input hashes in order.
    pub input_hash: String,
    pub outputs: Vec<String>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for e in entries {
            collect_files(&e, out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// SHA-256 of a file, or of a directory's files (relative names and
/// contents) in sorted order.
pub fn hash_path(path: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(path, &mut files)?;
    let mut h = Sha256::new();
    for f in files {
        if path.is_dir() {
            h.update(f.strip_prefix(path).unwrap_or(&f).to_string_lossy().as_bytes());
        }
        h.update(fs::read(&f).with_context(|| format!("hashing {}", f.display()))?);
    }
    Ok(hex(&h.finalize()))
}

impl RunManifest {
    pub fn new(command: &str, args: &[String], seed: Option<u64>) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            args: args.to_vec(),
            seed,
            config: BTreeMap::new(),
            inputs: Vec::new(),
            input_hash: String::new(),
            outputs: Vec::new(),
        }
    }

    pub fn config(mut self, name: &str, text: String) -> Self {
        self.config.insert(name.to_string(), text);
        self
    }

    pub fn input(mut self, path: &Path) -> Result<Self> {
        self.inputs.push(InputRecord {
            path: path.display().to_string(),
            sha256: hash_path(path)?,
        });
        Ok(self)
    }

    pub fn output(mut self, path: &Path) -> Self {
        self.outputs.push(path.display().to_string());
        self
    }

    /// Writes `<out>/manifest.json`.
    pub fn write(mut self, out: &Path) -> Result<PathBuf> {
        let mut h = Sha256::new();
        for i in &self.inputs {
            h.update(i.sha256.as_bytes());
        }
        self.input_hash = hex(&h.finalize());
        let path = out.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&self)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
