//! Degraded-mode flags collected over a run.

use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegradedFlag {
    /// Pipeline stage that fell back, e.g. `knowledge.search` or `review.code`.
    pub stage: String,
    pub detail: String,
}

/// Shared, append-only flag sink. Cloning shares the underlying list.
#[derive(Debug, Clone, Default)]
pub struct Flags {
    inner: Arc<Mutex<Vec<DegradedFlag>>>,
}

impl Flags {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn raise(&self, stage: impl Into<String>, detail: impl Into<String>) {
        let flag = DegradedFlag {
            stage: stage.into(),
            detail: detail.into(),
        };
        tracing::warn!(stage = %flag.stage, detail = %flag.detail, "degraded");
        self.inner.lock().expect("flag lock").push(flag);
    }

    /// Flags sorted by (stage, detail); concurrent stages raise in
    /// nondeterministic order, so reports use this ordering.
    pub fn snapshot(&self) -> Vec<DegradedFlag> {
        let mut flags = self.inner.lock().expect("flag lock").clone();
        flags.sort_by(|a, b| (&a.stage, &a.detail).cmp(&(&b.stage, &b.detail)));
        flags
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("flag lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has_stage(&self, stage: &str) -> bool {
        self.inner
            .lock()
            .expect("flag lock")
            .iter()
            .any(|f| f.stage == stage)
    }
}
