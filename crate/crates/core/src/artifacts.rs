//! Run-directory persistence.
//!
//! Every artifact is written relative to a run root, and every path recorded
//! inside an artifact is relative to that root, so two runs into different
//! directories produce byte-identical trees.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};

pub const PROFILE_FILE: &str = "profile.json";
pub const KNOWLEDGE_FILE: &str = "knowledge.json";
pub const KNOWLEDGE_DIR: &str = "knowledge";
pub const ROLES_FILE: &str = "roles.json";
pub const QUESTIONS_DIR: &str = "questions";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const REPORT_FILE: &str = "run_report.json";
pub const CASSETTE_FILE: &str = "cassette.json";
pub const EXECUTIONS_FILE: &str = "executions.json";
pub const INPUT_DIR: &str = "input";

/// Recursively sorts object keys so the rendering does not depend on the
/// map implementation serde_json was built with.
fn sorted(value: Value) -> Value {
    match value {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            let mut out = Map::new();
            for (k, v) in entries {
                out.insert(k, sorted(v));
            }
            Value::Object(out)
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sorted).collect()),
        other => other,
    }
}

/// Pretty, key-sorted JSON with a trailing newline.
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> String {
    let value = serde_json::to_value(value).expect("artifact types serialize infallibly");
    let mut out = serde_json::to_string_pretty(&sorted(value)).expect("json values render");
    out.push('\n');
    out
}

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    /// Path of `abs` relative to the run root, with `/` separators.
    pub fn relative(&self, abs: &Path) -> String {
        let rel = abs.strip_prefix(&self.root).unwrap_or(abs);
        rel.components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/")
    }

    pub fn write_text(&self, rel: impl AsRef<Path>, contents: &str) -> std::io::Result<PathBuf> {
        self.write_bytes(rel, contents.as_bytes())
    }

    pub fn write_bytes(&self, rel: impl AsRef<Path>, contents: &[u8]) -> std::io::Result<PathBuf> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, contents)?;
        Ok(path)
    }

    pub fn write_json<T: Serialize + ?Sized>(
        &self,
        rel: impl AsRef<Path>,
        value: &T,
    ) -> std::io::Result<PathBuf> {
        self.write_text(rel, &canonical_json(value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn canonical_json_sorts_nested_keys() {
        let v = json!({"b": {"z": 1, "a": [ {"y": 2, "x": 1} ]}, "a": 0});
        let s = canonical_json(&v);
        assert!(s.find("\"a\": 0").unwrap() < s.find("\"b\"").unwrap());
        assert!(s.find("\"x\"").unwrap() < s.find("\"y\"").unwrap());
        assert!(s.ends_with("}\n"));
    }

    #[test]
    fn relative_paths_use_forward_slashes() {
        let dir = RunDir::new("/tmp/run");
        assert_eq!(
            dir.relative(Path::new("/tmp/run/questions/iter-1/q-1")),
            "questions/iter-1/q-1"
        );
    }
}
