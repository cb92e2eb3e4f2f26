use std::path::{Path, PathBuf};

use semcf::report::{read_document, sha256_hex, write_document};
use semcf::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const MANIFEST_FORMAT: &str = "manifest";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileHash {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactHashes {
    pub world: Option<String>,
    pub model: Option<String>,
    pub relevance: Option<String>,
    pub directions: Option<String>,
}

/// Everything needed to re-run a command and check its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    /// Resolved config; the output location is not part of it.
    pub config: RunConfig,
    pub master_seed: u64,
    pub hashes: ArtifactHashes,
    /// Upstream artifacts the command read.
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

impl RunManifest {
    pub fn file_name(command: &str) -> String {
        format!("{command}.manifest.json")
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join(Self::file_name(&self.command));
        write_document(&path, MANIFEST_FORMAT, self)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_document(path, MANIFEST_FORMAT)
    }
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// A listed file whose current content differs from its recorded hash.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mismatch {
    pub path: String,
    pub expected: String,
    /// `None` when the file is missing.
    pub found: Option<String>,
}

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.found {
            Some(h) => write!(f, "{}: expected {}, found {}", self.path, self.expected, h),
            None => write!(f, "{}: missing (expected {})", self.path, self.expected),
        }
    }
}

/// Checks every listed file under `base` against its recorded hash.
pub fn check_files(base: &Path, files: &[FileHash]) -> Vec<Mismatch> {
    files
        .iter()
        .filter_map(|f| {
            let found = hash_file(&base.join(&f.path)).ok();
            (found.as_deref() != Some(f.sha256.as_str())).then(|| Mismatch {
                path: f.path.clone(),
                expected: f.sha256.clone(),
                found,
            })
        })
        .collect()
}
