//! Run manifests and the corpus content hash.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LmError, Result};

/// Git's object hash for a blob (`"blob <len>\0" ++ bytes`), computed with
/// SHA-256 as in git's sha256 object format.
pub fn git_blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    /// Effective configuration after file values and flag overrides.
    pub config: BTreeMap<String, String>,
    pub corpus: Option<String>,
    pub corpus_hash: Option<String>,
    pub version: String,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: BTreeMap<String, String>) -> Self {
        RunManifest {
            command: command.to_string(),
            seed,
            config,
            corpus: None,
            corpus_hash: None,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn with_corpus(mut self, path: &Path, hash: &str) -> Self {
        self.corpus = Some(path.display().to_string());
        self.corpus_hash = Some(hash.to_string());
        self
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        std::fs::write(path, s).map_err(|e| LmError::io(path, e))
    }
}
