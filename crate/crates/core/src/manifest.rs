//! Per-stage manifests: file digests, seed, config hash and links to the
//! manifests that produced this stage's inputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_SUFFIX: &str = ".manifest.json";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed manifest {path}: {source}")]
    Malformed { path: PathBuf, source: serde_json::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedSource {
    /// Given in the config file or on the command line.
    Explicit,
    /// Drawn at startup because none was given.
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParentLink {
    pub stage: String,
    pub manifest: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub tool_version: String,
    pub seed: u64,
    pub seed_source: SeedSource,
    pub config_hash: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub parents: Vec<ParentLink>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<FileDigest, ManifestError> {
    let bytes = std::fs::read(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

pub fn manifest_path(dir: &Path, stage: &str) -> PathBuf {
    dir.join(format!("{stage}{MANIFEST_SUFFIX}"))
}

pub fn read_manifest(path: &Path) -> Result<Manifest, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ManifestError::Malformed {
        path: path.to_path_buf(),
        source,
    })
}

/// Manifests next to `input` whose outputs include a file with the same
/// digest. Unreadable or foreign JSON files are skipped.
fn parents_of(input: &FileDigest) -> Vec<ParentLink> {
    let dir = Path::new(&input.path).parent().unwrap_or(Path::new("."));
    let dir = if dir.as_os_str().is_empty() {
        Path::new(".")
    } else {
        dir
    };
    let Ok(entries) = std::fs::read_dir(dir) else {
        return Vec::new();
    };
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(MANIFEST_SUFFIX))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .filter_map(|p| read_manifest(&p).ok().map(|m| (p, m)))
        .filter(|(_, m)| m.outputs.iter().any(|o| o.sha256 == input.sha256))
        .map(|(p, m)| ParentLink {
            stage: m.stage,
            manifest: p.display().to_string(),
            config_hash: m.config_hash,
        })
        .collect()
}

impl Manifest {
    pub fn build(
        stage: &str,
        seed: u64,
        seed_source: SeedSource,
        config_hash: String,
        inputs: &[&Path],
        outputs: &[&Path],
    ) -> Result<Self, ManifestError> {
        let inputs: Vec<FileDigest> = inputs.iter().map(|p| file_digest(p)).collect::<Result<_, _>>()?;
        let outputs = outputs.iter().map(|p| file_digest(p)).collect::<Result<_, _>>()?;
        let mut parents: Vec<ParentLink> = inputs.iter().flat_map(parents_of).collect();
        parents.retain(|p| p.stage != stage);
        parents.sort_by(|a, b| a.manifest.cmp(&b.manifest));
        parents.dedup();
        Ok(Self {
            stage: stage.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            seed,
            seed_source,
            config_hash,
            inputs,
            outputs,
            parents,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, ManifestError> {
        let path = manifest_path(dir, &self.stage);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|source| ManifestError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }
}

/// Follows parent links from `stage` back to the roots; returns the stages
/// visited, nearest first. Fails if a linked manifest is missing or its
/// config hash no longer matches the link.
pub fn trace_chain(dir: &Path, stage: &str) -> Result<Vec<String>, String> {
    let mut seen = Vec::new();
    let mut queue = vec![manifest_path(dir, stage)];
    while let Some(p) = queue.pop() {
        let m = read_manifest(&p).map_err(|e| e.to_string())?;
        if seen.contains(&m.stage) {
            continue;
        }
        for link in &m.parents {
            let parent = read_manifest(Path::new(&link.manifest)).map_err(|e| e.to_string())?;
            if parent.config_hash != link.config_hash {
                return Err(format!("{} links a stale {} manifest", m.stage, link.stage));
            }
            queue.push(PathBuf::from(&link.manifest));
        }
        seen.push(m.stage);
    }
    Ok(seen)
}
