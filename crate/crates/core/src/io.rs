//! Run manifests and small persistence helpers shared by the drivers.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";

/// Compact JSON with object keys sorted at every level.
pub fn canonical_json(value: &serde_json::Value) -> String {
    // serde_json's default map is ordered by key
    serde_json::to_string(value).expect("a JSON value always serializes")
}

/// SHA-256 of the canonical form of a JSON document.
pub fn config_hash(text: &str) -> Result<String> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    Ok(hex::encode(Sha256::digest(canonical_json(&value).as_bytes())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: Option<String>,
    pub input_paths: Vec<PathBuf>,
    pub output_paths: Vec<PathBuf>,
    pub tool_version: String,
    /// RFC 3339, UTC.
    pub timestamp: String,
    pub seeds: Vec<u64>,
    /// Exit code of the invocation.
    pub exit_code: i32,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        let timestamp = time::OffsetDateTime::now_utc()
            .format(&time::format_description::well_known::Rfc3339)
            .unwrap_or_default();
        Self {
            command: command.to_string(),
            config_hash: None,
            input_paths: Vec::new(),
            output_paths: Vec::new(),
            tool_version: TOOL_VERSION.to_string(),
            timestamp,
            seeds: Vec::new(),
            exit_code: 0,
        }
    }

    /// Writes `manifest.json` into `dir`, replacing any earlier one.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        write_json(&path, self)?;
        Ok(path)
    }
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
