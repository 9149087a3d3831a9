//! One manifest per command invocation: what ran, with which configuration,
//! and the hashes of everything it read and wrote.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    pub fn hash(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
        Ok(Self {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub started_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunManifest {
    pub fn start(command: &str, argv: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            argv,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: serde_json::Value::Null,
            seeds: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_at: Utc::now(),
            finished_at: None,
            status: RunStatus::Running,
            error: None,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(Artifact::hash(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(Artifact::hash(path)?);
        Ok(())
    }

    pub fn finish(&mut self, result: &Result<()>) {
        self.finished_at = Some(Utc::now());
        match result {
            Ok(()) => self.status = RunStatus::Ok,
            Err(e) => {
                self.status = RunStatus::Error;
                self.error = Some(format!("{e:#}"));
            }
        }
    }

    /// Manifest location for `command` under `out_dir`.
    pub fn path_in(out_dir: &Path, command: &str) -> PathBuf {
        out_dir.join(format!("{command}.manifest.json"))
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        let path = Self::path_in(out_dir, &self.command);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashes_match_known_digest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("abc.txt");
        fs::write(&path, "abc").unwrap();
        assert_eq!(
            Artifact::hash(&path).unwrap().sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn failed_runs_record_the_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::start("eval", vec!["rec-cbm".into(), "eval".into()]);
        m.finish(&Err(anyhow::anyhow!("no checkpoint")));
        let path = m.write(dir.path()).unwrap();
        let back: RunManifest = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(back.status, RunStatus::Error);
        assert_eq!(back.error.as_deref(), Some("no checkpoint"));
        assert!(back.finished_at.is_some());
    }
}
