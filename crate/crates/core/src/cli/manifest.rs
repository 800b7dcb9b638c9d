//! Run manifests and all-or-nothing output writing.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::error::Result;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    /// Absent for files whose content is wall-clock dependent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

impl FileRecord {
    pub fn of(path: &Path, bytes: &[u8]) -> Self {
        Self {
            path: path.display().to_string(),
            sha256: Some(artifact::sha256_hex(bytes)),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(Self::of(path, &artifact::read(path)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub args: Vec<String>,
    pub config: Option<FileRecord>,
    pub seed: Option<u64>,
    pub threads: usize,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    /// Milliseconds since the Unix epoch.
    pub started_at_ms: u128,
    pub finished_at_ms: u128,
}

pub fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, threads: usize) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            config: None,
            seed,
            threads,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_at_ms: now_ms(),
            finished_at_ms: 0,
        }
    }
}

/// Files staged in memory and written together. If any write fails, the
/// files already written by this batch are removed again.
#[derive(Default)]
pub struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
    unhashed: Vec<PathBuf>,
}

impl Outputs {
    pub fn add(&mut self, path: impl Into<PathBuf>, bytes: impl Into<Vec<u8>>) {
        self.files.push((path.into(), bytes.into()));
    }

    /// Stages a file that is listed in the manifest without a hash, so that
    /// timing measurements do not leak into reproducible content.
    pub fn add_unhashed(&mut self, path: impl Into<PathBuf>, bytes: impl Into<Vec<u8>>) {
        let path = path.into();
        self.unhashed.push(path.clone());
        self.files.push((path, bytes.into()));
    }

    /// Writes all staged files, then `manifest` (listing them) at `manifest_path`.
    pub fn commit(self, mut manifest: RunManifest, manifest_path: &Path) -> Result<()> {
        manifest.outputs = self
            .files
            .iter()
            .map(|(p, b)| {
                let mut r = FileRecord::of(p, b);
                if self.unhashed.contains(p) {
                    r.sha256 = None;
                }
                r
            })
            .collect();
        manifest.finished_at_ms = now_ms();
        let mut files = self.files;
        files.push((manifest_path.to_path_buf(), artifact::to_json_pretty(&manifest)?));
        let mut written: Vec<&Path> = Vec::new();
        for (path, bytes) in &files {
            if let Err(e) = artifact::write_atomic(path, bytes) {
                for w in written {
                    let _ = std::fs::remove_file(w);
                }
                return Err(e);
            }
            written.push(path);
        }
        Ok(())
    }
}
