use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Git-style object hash: SHA-256 over `blob <len>\0` followed by the bytes.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value) -> Manifest {
        Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config,
            inputs: vec![],
            outputs: vec![],
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
        self.inputs.push(FileEntry {
            path: path.display().to_string(),
            sha256: blob_hash(&bytes),
        });
        Ok(())
    }

    /// Writes `bytes` to `out/rel` and records it.
    pub fn write(&mut self, out: &Path, rel: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = out.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::Io(parent.to_path_buf(), e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| CliError::Io(path.clone(), e))?;
        self.outputs.push(FileEntry {
            path: rel.to_string(),
            sha256: blob_hash(bytes),
        });
        Ok(path)
    }

    /// Records a file some other writer already placed under `out`.
    pub fn record(&mut self, out: &Path, rel: &str) -> Result<(), CliError> {
        let path = out.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| CliError::Io(path, e))?;
        self.outputs.push(FileEntry {
            path: rel.to_string(),
            sha256: blob_hash(&bytes),
        });
        Ok(())
    }

    pub fn finish(self, out: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(&self).map_err(|e| CliError::Core(e.into()))?;
        let path = out.join("manifest.json");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::Io(path, e))
    }
}
