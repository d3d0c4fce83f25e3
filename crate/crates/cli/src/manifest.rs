use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Record of one command run: what was asked, the fully resolved
/// configuration and a digest of every file written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub out_dir: String,
    /// Output path (relative to `out_dir`) to hex sha256.
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Collects written files, then writes the manifest next to them.
pub struct ArtifactSet {
    out_dir: PathBuf,
    files: Vec<PathBuf>,
}

impl ArtifactSet {
    pub fn new(out_dir: &Path) -> Self {
        Self {
            out_dir: out_dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    pub fn add(&mut self, path: PathBuf) {
        self.files.push(path);
    }

    pub fn finish(
        self,
        manifest_path: &Path,
        command: &str,
        config_path: Option<&Path>,
        config: serde_json::Value,
        seed: u64,
    ) -> anyhow::Result<RunManifest> {
        let mut artifacts = BTreeMap::new();
        for f in &self.files {
            let key = f.strip_prefix(&self.out_dir).unwrap_or(f).to_string_lossy().into_owned();
            artifacts.insert(key, sha256_file(f)?);
        }
        let manifest = RunManifest {
            command: command.to_string(),
            config_path: config_path.map(|p| p.to_string_lossy().into_owned()),
            config,
            seed,
            out_dir: self.out_dir.to_string_lossy().into_owned(),
            artifacts,
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        std::fs::write(manifest_path, text).with_context(|| format!("writing {}", manifest_path.display()))?;
        Ok(manifest)
    }
}
