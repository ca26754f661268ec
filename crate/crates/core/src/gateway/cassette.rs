//! Persisted request/response log used for offline replay.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{CallKind, GatewayError, SearchHit, Usage};

pub const CASSETTE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RecordedResponse {
    Completion { text: String, usage: Usage },
    Embedding { vectors: Vec<Vec<f64>> },
    Search { hits: Vec<SearchHit> },
    /// A transport failure observed while recording; replays as one.
    Failure { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub fingerprint: String,
    pub kind: CallKind,
    /// Human-readable echo of the request; not consulted during lookup.
    pub request: Value,
    pub response: RecordedResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cassette {
    pub version: u32,
    pub entries: Vec<CassetteEntry>,
}

impl Default for Cassette {
    fn default() -> Self {
        Self {
            version: CASSETTE_VERSION,
            entries: Vec::new(),
        }
    }
}

impl Cassette {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path).map_err(|e| GatewayError::CassetteUnavailable {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| GatewayError::CassetteUnavailable {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Writes the cassette with entries stably sorted by fingerprint, so
    /// the file does not depend on the interleaving of concurrent calls.
    /// Per-fingerprint order, which replay relies on, is preserved.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut sorted = self.clone();
        sorted.entries.sort_by(|a, b| a.fingerprint.cmp(&b.fingerprint));
        std::fs::write(path, crate::artifacts::canonical_json(&sorted))
    }

    pub fn push(&mut self, entry: CassetteEntry) {
        self.entries.push(entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry positions grouped by fingerprint, in recording order.
    pub fn index(&self) -> HashMap<String, Vec<usize>> {
        let mut index: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            index.entry(e.fingerprint.clone()).or_default().push(i);
        }
        index
    }
}

/// Replay cursor over a loaded cassette.
///
/// The k-th lookup of a fingerprint returns the k-th entry recorded for it;
/// once exhausted the last entry repeats. A single recording therefore always
/// replays identically, while a scripted sequence (e.g. a malformed reply
/// followed by a valid one) drives retries.
#[derive(Debug, Default)]
pub struct ReplayCursor {
    index: HashMap<String, Vec<usize>>,
    next: HashMap<String, usize>,
}

impl ReplayCursor {
    pub fn new(cassette: &Cassette) -> Self {
        Self::from_fingerprints(cassette.entries.iter().map(|e| e.fingerprint.as_str()))
    }

    /// Cursor over any recording whose i-th entry has the i-th fingerprint.
    pub fn from_fingerprints<'a>(fingerprints: impl IntoIterator<Item = &'a str>) -> Self {
        let mut index: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, fp) in fingerprints.into_iter().enumerate() {
            index.entry(fp.to_string()).or_default().push(i);
        }
        Self {
            index,
            next: HashMap::new(),
        }
    }

    pub fn next_position(&mut self, fingerprint: &str) -> Option<usize> {
        let positions = self.index.get(fingerprint)?;
        let k = self.next.entry(fingerprint.to_string()).or_insert(0);
        let pos = positions[(*k).min(positions.len() - 1)];
        *k += 1;
        Some(pos)
    }
}

/// SHA-256 over the canonical JSON rendering of `content`.
pub fn content_hash(content: &Value) -> String {
    let canonical = crate::artifacts::canonical_json(content);
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

pub fn bytes_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
