//! On-disk container conventions shared by datasets, checkpoints and
//! feature exports: a pretty-printed JSON manifest next to flat binary
//! blobs. Each blob is listed in the manifest with its byte length and
//! SHA-256 digest.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: format version {found}, this build reads version {expected}")]
    Version { path: PathBuf, found: u64, expected: u32 },
    #[error("{path}: truncated file, expected {expected} bytes, found {found}")]
    Truncated { path: PathBuf, expected: u64, found: u64 },
    #[error("{path}: {found} bytes, more than the {expected} declared")]
    Oversized { path: PathBuf, expected: u64, found: u64 },
    #[error("{path}: checksum mismatch")]
    Checksum { path: PathBuf },
    #[error("manifest and tensor counts disagree: {0}")]
    CountMismatch(String),
    #[error("{path}: malformed manifest: {msg}")]
    Manifest { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ContainerError + '_ {
    move |source| ContainerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobInfo {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn create_dir(dir: &Path) -> Result<(), ContainerError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

pub fn write_blob(dir: &Path, name: &str, bytes: &[u8]) -> Result<BlobInfo, ContainerError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(io_err(&path))?;
    Ok(BlobInfo {
        file: name.to_string(),
        bytes: bytes.len() as u64,
        sha256: sha256_hex(bytes),
    })
}

/// Reads a blob and verifies its length, then its digest.
pub fn read_blob(dir: &Path, info: &BlobInfo) -> Result<Vec<u8>, ContainerError> {
    let path = dir.join(&info.file);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let found = bytes.len() as u64;
    if found < info.bytes {
        return Err(ContainerError::Truncated {
            path,
            expected: info.bytes,
            found,
        });
    }
    if found > info.bytes {
        return Err(ContainerError::Oversized {
            path,
            expected: info.bytes,
            found,
        });
    }
    if sha256_hex(&bytes) != info.sha256 {
        return Err(ContainerError::Checksum { path });
    }
    Ok(bytes)
}

pub fn f32_to_le(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// Decodes little-endian f32 values; trailing partial words are ignored.
pub fn le_to_f32(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn write_manifest<T: Serialize>(path: &Path, value: &T) -> Result<(), ContainerError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| ContainerError::Manifest {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Parses a manifest, checking `format_version` before the full schema.
pub fn read_manifest<T: DeserializeOwned>(path: &Path) -> Result<T, ContainerError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let malformed = |msg: String| ContainerError::Manifest {
        path: path.to_path_buf(),
        msg,
    };
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    let found = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| malformed("missing format_version".into()))?;
    if found != FORMAT_VERSION as u64 {
        return Err(ContainerError::Version {
            path: path.to_path_buf(),
            found,
            expected: FORMAT_VERSION,
        });
    }
    serde_json::from_value(raw).map_err(|e| malformed(e.to_string()))
}
