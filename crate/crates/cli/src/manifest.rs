//! `run.json`: what a command read, with which settings, and what it wrote.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub threads: usize,
    pub config: serde_json::Value,
    /// Hash over the contents of every input file, see [`content_hash`].
    pub input_hash: String,
    pub inputs: Vec<PathBuf>,
    pub artifacts: Vec<PathBuf>,
}

pub const MANIFEST_NAME: &str = "run.json";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of `blob <len>\0<bytes>`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    hex(&h.finalize())
}

/// Tree-style hash: SHA-256 over one `<blob hash> <file name>` line per
/// input, in the given order. Independent of where the inputs live.
pub fn content_hash(files: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    for f in files {
        let bytes = std::fs::read(f).map_err(io(f))?;
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        h.update(format!("{} {name}\n", blob_hash(&bytes)));
    }
    Ok(hex(&h.finalize()))
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, threads: usize, config: serde_json::Value, inputs: Vec<PathBuf>) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            threads,
            config,
            input_hash: content_hash(&inputs)?,
            inputs,
            artifacts: Vec::new(),
        })
    }

    /// Writes `run.json` into `dir`; artifact paths are stored relative to it.
    pub fn write(&mut self, dir: &Path) -> Result<PathBuf> {
        for a in &mut self.artifacts {
            if let Ok(rel) = a.strip_prefix(dir) {
                *a = rel.to_path_buf();
            }
        }
        self.artifacts.sort();
        let path = dir.join(MANIFEST_NAME);
        let json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        std::fs::write(&path, json).map_err(io(&path))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_known_digest() {
        // sha256 of "blob 0\0", as `git hash-object --object-format=sha256` prints for an empty file.
        assert_eq!(blob_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
    }

    #[test]
    fn content_hash_tracks_content_not_location() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for d in [&a, &b] {
            std::fs::write(d.path().join("x.mid"), b"abc").unwrap();
        }
        let ha = content_hash(&[a.path().join("x.mid")]).unwrap();
        assert_eq!(ha, content_hash(&[b.path().join("x.mid")]).unwrap());
        std::fs::write(b.path().join("x.mid"), b"abd").unwrap();
        assert_ne!(ha, content_hash(&[b.path().join("x.mid")]).unwrap());
    }
}
