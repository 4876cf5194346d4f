//! Run manifests: one per artifact directory, linked to the manifests of
//! the artifacts they were built from.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Reference to an upstream manifest and the hash of its contents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParentRef {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config_digest: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: u64,
    pub parents: Vec<ParentRef>,
    /// Checkpoints written by this run, oldest first.
    pub checkpoints: Vec<PathBuf>,
    pub tool_version: String,
    pub complete: bool,
    /// Free-form facts about the run, such as the JPEG codec used.
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, run_id: String, config_digest: String, seed: u64) -> Self {
        Self {
            run_id,
            command: command.to_string(),
            config_digest,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed,
            parents: Vec::new(),
            checkpoints: Vec::new(),
            tool_version: TOOL_VERSION.to_string(),
            complete: false,
            notes: BTreeMap::new(),
        }
    }

    pub fn path_in(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_FILE)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = Self::path_in(dir);
        let bytes = std::fs::read(&p).at(&p)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format { path: p, reason: e.to_string() })
    }

    /// Complete manifest in `dir`, if any.
    pub fn load_complete(dir: &Path) -> Option<Self> {
        Self::load(dir).ok().filter(|m| m.complete)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).at(dir)?;
        let p = Self::path_in(dir);
        let tmp = p.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?).at(&tmp)?;
        std::fs::rename(&tmp, &p).at(&p)
    }

    /// Records the manifest of the upstream artifact in `dir`.
    pub fn add_parent(&mut self, dir: &Path) -> Result<()> {
        let path = Self::path_in(dir);
        let bytes = std::fs::read(&path).at(&path)?;
        self.parents.push(ParentRef { path, sha256: hex::encode(Sha256::digest(&bytes)) });
        Ok(())
    }
}

/// Follows parent links from the manifest in `dir`, checking that every
/// upstream manifest exists, is complete and is unchanged. Returns the chain
/// in visit order, starting with `dir`'s own manifest.
pub fn verify_lineage(dir: &Path) -> Result<Vec<RunManifest>> {
    let mut out = Vec::new();
    let mut stack = vec![RunManifest::path_in(dir)];
    while let Some(path) = stack.pop() {
        let bytes = std::fs::read(&path).at(&path)?;
        let m: RunManifest = serde_json::from_slice(&bytes).map_err(|e| Error::Format { path: path.clone(), reason: e.to_string() })?;
        if !m.complete {
            return Err(Error::MissingArtifact(format!("{} is incomplete", path.display())));
        }
        for p in &m.parents {
            let actual = std::fs::read(&p.path).at(&p.path)?;
            if hex::encode(Sha256::digest(&actual)) != p.sha256 {
                return Err(Error::Format { path: p.path.clone(), reason: "manifest changed since it was referenced".into() });
            }
            stack.push(p.path.clone());
        }
        out.push(m);
    }
    Ok(out)
}
