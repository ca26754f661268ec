//! Artifact tree comparison for `replay-verify`.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;
use walkdir::WalkDir;

/// Relative path to contents of every file under `root`, minus top-level
/// names in `ignore`.
fn snapshot(root: &Path, ignore: &[&str]) -> anyhow::Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.with_context(|| format!("walking {}", root.display()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(root).expect("walkdir stays under root");
        let rel = rel.to_string_lossy().replace('\\', "/");
        if ignore.contains(&rel.as_str()) {
            continue;
        }
        let bytes = std::fs::read(entry.path()).with_context(|| format!("reading {}", entry.path().display()))?;
        out.insert(rel, bytes);
    }
    Ok(out)
}

/// One line per differing file; empty when the trees match byte for byte.
pub fn diff_trees(expected: &Path, actual: &Path, ignore: &[&str]) -> anyhow::Result<Vec<String>> {
    let a = snapshot(expected, ignore)?;
    let b = snapshot(actual, ignore)?;
    let mut diffs = Vec::new();
    for (path, bytes) in &a {
        match b.get(path) {
            None => diffs.push(format!("missing in replay: {path}")),
            Some(other) if other != bytes => diffs.push(format!("content differs: {path}")),
            Some(_) => {}
        }
    }
    for path in b.keys().filter(|p| !a.contains_key(*p)) {
        diffs.push(format!("only in replay: {path}"));
    }
    Ok(diffs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reports_every_kind_of_difference() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(a.path().join("q")).unwrap();
        std::fs::create_dir_all(b.path().join("q")).unwrap();
        std::fs::write(a.path().join("q/same.txt"), "x").unwrap();
        std::fs::write(b.path().join("q/same.txt"), "x").unwrap();
        std::fs::write(a.path().join("changed.txt"), "1").unwrap();
        std::fs::write(b.path().join("changed.txt"), "2").unwrap();
        std::fs::write(a.path().join("gone.txt"), "").unwrap();
        std::fs::write(b.path().join("new.txt"), "").unwrap();
        std::fs::write(a.path().join("cassette.json"), "a").unwrap();
        let d = diff_trees(a.path(), b.path(), &["cassette.json"]).unwrap();
        assert_eq!(
            d,
            vec![
                "content differs: changed.txt".to_string(),
                "missing in replay: gone.txt".to_string(),
                "only in replay: new.txt".to_string(),
            ]
        );
        assert!(diff_trees(a.path(), a.path(), &[]).unwrap().is_empty());
    }
}
