//! Per-command manifests. Each records the config hash and the SHA-256 of
//! every input and output file; a stage refuses inputs whose hash differs
//! from the one recorded by the stage that wrote them.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use trajforge::error::Error;

use crate::error::{CliError, Result};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    /// Path relative to the run directory, or as given when outside it.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub code_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    /// Command-specific counters.
    #[serde(default)]
    pub notes: serde_json::Map<String, serde_json::Value>,
}

/// Wall-clock times, kept out of the manifest so reruns stay byte-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub command: String,
    pub started: String,
    pub finished: String,
    pub seconds: f64,
}

pub fn manifest_name(command: &str) -> String {
    format!("manifest_{command}.json")
}

pub fn timing_name(command: &str) -> String {
    format!("timing_{command}.json")
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| {
            Error::Parse {
                location: path.display().to_string(),
                reason: e.to_string(),
            }
            .into()
        })
    }

    pub fn output(&self, name: &str) -> Option<&FileHash> {
        self.outputs.iter().find(|f| f.path == name)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

/// Check that `dir/name` exists and that one of the manifests of `producers`
/// records its current hash.
pub fn verify_input(dir: &Path, name: &str, producers: &[&str]) -> Result<FileHash> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(CliError::MissingInput {
            path,
            producer: producers.join("` or `trajforge "),
        });
    }
    let actual = file_hash(&path)?;
    let mut mismatch = None;
    for p in producers {
        let mpath = dir.join(manifest_name(p));
        if !mpath.exists() {
            continue;
        }
        match Manifest::load(&mpath)?.output(name) {
            Some(f) if f.sha256 == actual => {
                return Ok(FileHash {
                    path: name.to_string(),
                    sha256: actual,
                })
            }
            Some(f) if mismatch.is_none() => mismatch = Some((mpath, f.sha256.clone())),
            _ => {}
        }
    }
    Err(match mismatch {
        Some((manifest, recorded)) => CliError::Provenance {
            name: name.to_string(),
            manifest,
            recorded,
            actual,
        },
        None => CliError::Unrecorded {
            dir: dir.to_path_buf(),
            name: name.to_string(),
        },
    })
}
