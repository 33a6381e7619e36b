use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use mdssl_core::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub corpus_path: Option<PathBuf>,
    /// SHA-256 of the corpus header line, which determines the corpus.
    pub corpus_header_sha256: Option<String>,
    pub checkpoints: Vec<PathBuf>,
    pub metric_files: Vec<PathBuf>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, started_unix: u64) -> Self {
        Self {
            command: command.to_string(),
            seed: None,
            config,
            corpus_path: None,
            corpus_header_sha256: None,
            checkpoints: Vec::new(),
            metric_files: Vec::new(),
            started_unix,
            finished_unix: started_unix,
        }
    }

    pub fn with_corpus(mut self, path: &Path, corpus_text: &str) -> Self {
        self.corpus_path = Some(path.to_path_buf());
        self.corpus_header_sha256 = Some(sha256_hex(corpus_text.lines().next().unwrap_or("").as_bytes()));
        self
    }

    /// Writes `manifest.json` into `dir` after checking that every listed
    /// file exists.
    pub fn write(mut self, dir: &Path) -> Result<PathBuf> {
        for p in self.checkpoints.iter().chain(&self.metric_files) {
            if !p.is_file() {
                return Err(Error::Degenerate(format!("manifest references missing file {}", p.display())));
            }
        }
        self.finished_unix = now_unix();
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn refuses_dangling_references() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("x", serde_json::Value::Null, 0);
        m.metric_files.push(dir.path().join("nope.csv"));
        assert!(m.write(dir.path()).is_err());
    }
}
