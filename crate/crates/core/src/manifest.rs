//! Per-command run manifests with content hashes of produced files.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::write_atomic;
use crate::error::{io_err, Error, Result};

/// SHA-256 over `blob <len>\0<content>`, as git's SHA-256 object format does.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex(&h.finalize())
}

pub fn sha256_hex(content: &[u8]) -> String {
    hex(&Sha256::digest(content))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Ok,
    DryRun,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_hash: String,
    /// Canonical configuration text the hash was taken over.
    pub config: String,
    pub master_seed: u64,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub status: RunStatus,
    pub error: Option<String>,
    /// Checkpoints the run will evaluate, for commands that plan policy runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planned_models: Option<usize>,
    pub artifacts: Vec<Artifact>,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, config_text: &str, master_seed: u64) -> Self {
        Self {
            command: command.to_string(),
            args,
            config_hash: sha256_hex(config_text.as_bytes()),
            config: config_text.to_string(),
            master_seed,
            started_unix: now(),
            finished_unix: None,
            status: RunStatus::Running,
            error: None,
            planned_models: None,
            artifacts: Vec::new(),
        }
    }

    pub fn file_name(command: &str) -> String {
        format!("manifest_{command}.json")
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(Self::file_name(&self.command));
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(&path, json.as_bytes())?;
        Ok(path)
    }

    /// Hashes every regular file under `root` (recursively, sorted) except
    /// manifests, records the outcome and rewrites the manifest.
    pub fn finalize(&mut self, dir: &Path, root: &Path, status: RunStatus, error: Option<String>) -> Result<PathBuf> {
        self.artifacts.clear();
        if root.exists() {
            let mut files = Vec::new();
            collect_files(root, &mut files)?;
            files.sort();
            for f in files {
                let bytes = std::fs::read(&f).map_err(io_err(&f))?;
                self.artifacts.push(Artifact {
                    path: f.strip_prefix(root).unwrap_or(&f).to_path_buf(),
                    hash: blob_hash(&bytes),
                });
            }
        }
        self.status = status;
        self.error = error;
        self.finished_unix = Some(now());
        self.write(dir)
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if dir.is_file() {
        out.push(dir.to_path_buf());
        return Ok(());
    }
    for e in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let p = e.map_err(io_err(dir))?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else if !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("manifest_")) {
            out.push(p);
        }
    }
    Ok(())
}
