//! Run directories and content-hashed manifests.
//!
//! Every run writes `manifest.json` before any training starts; output files
//! are recorded with SHA-256 hashes as they appear, and a verifier re-hashes
//! everything. Run directories are append-only: creating over an existing
//! one requires an explicit force.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    /// Unix seconds at creation.
    pub created: u64,
    /// Root seed every stream in the run derives from.
    pub seed: u64,
    /// Full command/experiment configuration, schema depends on the command.
    pub config: serde_json::Value,
    /// Relative file name -> SHA-256 hex of contents.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(seed: u64, config: serde_json::Value) -> Self {
        let created = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Manifest {
            created,
            seed,
            config,
            files: BTreeMap::new(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// A run directory with its manifest.
#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
    pub manifest: Manifest,
}

impl RunDir {
    /// Creates the directory and writes the initial manifest. Fails if the
    /// directory already contains a manifest, unless `force`.
    pub fn create(path: &Path, seed: u64, config: serde_json::Value, force: bool) -> Result<Self> {
        let manifest_path = path.join(MANIFEST_NAME);
        if manifest_path.exists() && !force {
            return Err(Error::Config(format!(
                "run directory {} already has a manifest; pass force to overwrite",
                path.display()
            )));
        }
        std::fs::create_dir_all(path)?;
        let run = RunDir {
            path: path.to_path_buf(),
            manifest: Manifest::new(seed, config),
        };
        run.save_manifest()?;
        Ok(run)
    }

    pub fn open(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path.join(MANIFEST_NAME))?;
        let manifest: Manifest = serde_json::from_slice(&raw)?;
        Ok(RunDir {
            path: path.to_path_buf(),
            manifest,
        })
    }

    fn save_manifest(&self) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(self.path.join(MANIFEST_NAME), json)?;
        Ok(())
    }

    /// Writes a file into the run directory and records its hash.
    pub fn write_file(&mut self, name: &str, contents: &[u8]) -> Result<()> {
        std::fs::write(self.path.join(name), contents)?;
        self.manifest
            .files
            .insert(name.to_string(), sha256_hex(contents));
        self.save_manifest()
    }

    /// Records an already-written file (e.g. a checkpoint streamed to disk).
    pub fn record_file(&mut self, name: &str) -> Result<()> {
        let bytes = std::fs::read(self.path.join(name))?;
        self.manifest
            .files
            .insert(name.to_string(), sha256_hex(&bytes));
        self.save_manifest()
    }

    /// Re-hashes every listed file. Returns the names that are missing or
    /// whose contents changed; empty means the run verifies.
    pub fn verify(&self) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for (name, want) in &self.manifest.files {
            match std::fs::read(self.path.join(name)) {
                Ok(bytes) if &sha256_hex(&bytes) == want => {}
                _ => bad.push(name.clone()),
            }
        }
        Ok(bad)
    }
}
