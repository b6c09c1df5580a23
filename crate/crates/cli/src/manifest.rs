use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Provenance record written beside every output.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    /// Path to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &'static str, seed: Option<u64>, config: serde_json::Value) -> Self {
        Manifest {
            tool: "vone",
            version: env!("CARGO_PKG_VERSION"),
            command,
            argv: std::env::args().collect(),
            seed,
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input_file(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn input_checksum(&mut self, label: impl Into<String>, checksum: impl Into<String>) {
        self.inputs.insert(label.into(), checksum.into());
    }

    pub fn output_file(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Writes `dir/manifest.json`.
    pub fn write_in(&self, dir: &Path) -> Result<PathBuf> {
        self.write_to(&dir.join("manifest.json"))
    }

    /// Writes `<stem>.manifest.json` next to the output file `path`.
    pub fn write_beside(&self, path: &Path) -> Result<PathBuf> {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "output".into());
        self.write_to(&path.with_file_name(format!("{stem}.manifest.json")))
    }

    fn write_to(&self, path: &Path) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path.to_path_buf())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
