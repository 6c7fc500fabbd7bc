//! Content hashes recorded in every output for provenance.

use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Git-style object hash: `sha256("blob <len>\0" ++ bytes)`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Serialize)]
pub struct FileHash {
    pub path: String,
    pub blob_sha256: String,
}

pub fn hash_files(paths: &[impl AsRef<Path>]) -> Result<Vec<FileHash>, CliError> {
    paths
        .iter()
        .map(|p| {
            let p = p.as_ref();
            let bytes = fs::read(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            Ok(FileHash {
                path: p.display().to_string(),
                blob_sha256: blob_hash(&bytes),
            })
        })
        .collect()
}

/// One hash for a set of input files: the file's own blob hash when
/// there is one, otherwise the sha256 of the newline-joined blob hashes.
pub fn combined_data_hash(files: &[FileHash]) -> String {
    match files {
        [one] => one.blob_sha256.clone(),
        many => sha256_hex(many.iter().map(|f| f.blob_sha256.as_str()).collect::<Vec<_>>().join("\n").as_bytes()),
    }
}

/// Hash of the canonical JSON encoding of a resolved config.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String, CliError> {
    let json = serde_json::to_string(cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(sha256_hex(json.as_bytes()))
}
