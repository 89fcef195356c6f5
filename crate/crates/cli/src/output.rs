//! Artifact persistence. Each file is written to a temporary sibling and
//! renamed into place; `manifest.json` is written last.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::hex;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl Artifact {
    pub fn new(name: impl Into<String>, bytes: Vec<u8>) -> Self {
        Artifact { name: name.into(), bytes }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ArtifactEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub experiment: String,
    pub seed: u64,
    pub config_sha256: String,
    pub passed: bool,
    pub artifacts: Vec<ArtifactEntry>,
    pub config: serde_json::Value,
}

#[derive(Debug, thiserror::Error)]
pub enum OutputError {
    #[error("{0} already holds results; pass --force to overwrite")]
    Exists(PathBuf),
    #[error("bad artifact name `{0}`")]
    BadName(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> OutputError + '_ {
    move |source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Refuses a directory that already holds a manifest unless `force` is set.
pub fn check_target(dir: &Path, force: bool) -> Result<(), OutputError> {
    if dir.join(MANIFEST).exists() && !force {
        return Err(OutputError::Exists(dir.to_path_buf()));
    }
    Ok(())
}

fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf, OutputError> {
    let target = dir.join(name);
    let mut tmp = tempfile::Builder::new()
        .prefix(&format!(".{name}."))
        .tempfile_in(dir)
        .map_err(io(dir))?;
    tmp.write_all(bytes).map_err(io(&target))?;
    tmp.as_file().sync_all().map_err(io(&target))?;
    tmp.persist(&target).map_err(|e| OutputError::Io {
        path: target.clone(),
        source: e.error,
    })?;
    Ok(target)
}

pub fn manifest_entries(artifacts: &[Artifact]) -> Vec<ArtifactEntry> {
    artifacts
        .iter()
        .map(|a| ArtifactEntry {
            name: a.name.clone(),
            sha256: hex(&Sha256::digest(&a.bytes)),
            bytes: a.bytes.len(),
        })
        .collect()
}

// Artifacts listed by an earlier manifest in the same directory.
fn previous_artifacts(dir: &Path) -> Vec<String> {
    let Ok(text) = fs::read_to_string(dir.join(MANIFEST)) else {
        return Vec::new();
    };
    let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) else {
        return Vec::new();
    };
    v["artifacts"]
        .as_array()
        .map(|a| a.iter().filter_map(|e| e["name"].as_str().map(String::from)).collect())
        .unwrap_or_default()
}

/// Writes every artifact and then the manifest into `dir`, creating it if
/// needed. Files left over from an earlier run that the new one does not
/// produce are removed. Returns the written paths, manifest last.
pub fn write_results(
    dir: &Path,
    artifacts: &[Artifact],
    manifest: &Manifest,
    force: bool,
) -> Result<Vec<PathBuf>, OutputError> {
    for a in artifacts {
        if a.name.is_empty() || a.name == MANIFEST || a.name.contains(['/', '\\']) || a.name.starts_with('.') {
            return Err(OutputError::BadName(a.name.clone()));
        }
    }
    fs::create_dir_all(dir).map_err(io(dir))?;
    check_target(dir, force)?;
    let stale: Vec<String> = previous_artifacts(dir)
        .into_iter()
        .filter(|old| !artifacts.iter().any(|a| &a.name == old) && !old.contains(['/', '\\']))
        .collect();
    let mut paths = Vec::with_capacity(artifacts.len() + 1);
    for a in artifacts {
        paths.push(write_atomic(dir, &a.name, &a.bytes)?);
    }
    let mut text = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    text.push(b'\n');
    paths.push(write_atomic(dir, MANIFEST, &text)?);
    for old in stale {
        let p = dir.join(old);
        if p.is_file() {
            fs::remove_file(&p).map_err(io(&p))?;
        }
    }
    Ok(paths)
}
