//! Structured description of a delimited tabular file.
//!
//! The profiler reads a comma-separated file with a header row and produces a
//! [`DatasetProfile`]: file metadata, per-column type inference and missing
//! counts, descriptive statistics for numeric columns, the first few rows, and
//! lightweight diagnostics (missing cells, duplicated rows).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

pub const DEFAULT_SAMPLE_K: usize = 5;

/// Columns with at most this many distinct non-missing values are categorical.
pub const CATEGORICAL_MAX_DISTINCT: usize = 20;

const MISSING_MARKERS: [&str; 4] = ["", "na", "n/a", "null"];

const DATE_LAYOUTS: [&str; 5] = ["%Y-%m-%d", "%Y/%m/%d", "%m/%d/%Y", "%d.%m.%Y", "%Y%m%d"];
const DATETIME_LAYOUTS: [&str; 5] = [
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y-%m-%d %H:%M:%S%.f",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M",
    "%m/%d/%Y %H:%M:%S",
];

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("dataset not found: {0}")]
    FileNotFound(PathBuf),
    #[error("malformed row {row}: {message}")]
    ParseError { row: u64, message: String },
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid profile document: {0}")]
    Document(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnType {
    Numeric,
    Categorical,
    Datetime,
    Text,
    Boolean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    #[serde(rename = "0.25")]
    pub p25: f64,
    #[serde(rename = "0.5")]
    pub p50: f64,
    #[serde(rename = "0.75")]
    pub p75: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericStats {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single value.
    pub std_dev: f64,
    pub min: f64,
    pub max: f64,
    pub quantiles: Quantiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnProfile {
    pub name: String,
    pub inferred_type: ColumnType,
    pub missing_count: u64,
    pub numeric_stats: Option<NumericStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    MissingValues,
    DuplicatedRows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticFlag {
    pub kind: DiagnosticKind,
    pub detail: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetProfile {
    pub file_name: String,
    pub file_size: u64,
    pub file_type: String,
    pub row_count: u64,
    pub column_count: u64,
    pub columns: Vec<ColumnProfile>,
    pub sample_rows: Vec<BTreeMap<String, String>>,
    pub diagnostics: Vec<DiagnosticFlag>,
}

impl DatasetProfile {
    pub fn column(&self, name: &str) -> Option<&ColumnProfile> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }

    /// Canonical key-sorted JSON rendering. Two renders of equal profiles are
    /// byte-identical, and [`parse_profile`] inverts it.
    pub fn render(&self) -> String {
        render_profile(self)
    }
}

pub fn is_missing(raw: &str) -> bool {
    let trimmed = raw.trim();
    MISSING_MARKERS
        .iter()
        .any(|marker| trimmed.eq_ignore_ascii_case(marker))
}

fn parse_bool(raw: &str) -> Option<bool> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" => Some(true),
        "false" | "no" => Some(false),
        _ => None,
    }
}

pub fn parse_number(raw: &str) -> Option<f64> {
    raw.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn is_datetime(raw: &str) -> bool {
    let s = raw.trim();
    if chrono::DateTime::parse_from_rfc3339(s).is_ok() {
        return true;
    }
    DATETIME_LAYOUTS
        .iter()
        .any(|layout| NaiveDateTime::parse_from_str(s, layout).is_ok())
        || DATE_LAYOUTS
            .iter()
            .any(|layout| NaiveDate::parse_from_str(s, layout).is_ok())
}

/// Infers a column type from its non-missing raw values.
///
/// Order: boolean, numeric, datetime, categorical (at most 20 distinct values),
/// text. A column with no non-missing values is text.
pub fn infer_type(values: &[&str]) -> ColumnType {
    if values.is_empty() {
        return ColumnType::Text;
    }
    if values.iter().all(|v| parse_bool(v).is_some()) {
        return ColumnType::Boolean;
    }
    if values.iter().all(|v| parse_number(v).is_some()) {
        return ColumnType::Numeric;
    }
    if values.iter().all(|v| is_datetime(v)) {
        return ColumnType::Datetime;
    }
    let distinct: HashSet<&str> = values.iter().map(|v| v.trim()).collect();
    if distinct.len() <= CATEGORICAL_MAX_DISTINCT {
        ColumnType::Categorical
    } else {
        ColumnType::Text
    }
}

/// Linear interpolation between order statistics over an ascending slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = h - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn numeric_stats(values: &[f64]) -> Option<NumericStats> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std_dev = if values.len() > 1 {
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        (ss / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(NumericStats {
        mean,
        std_dev,
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        quantiles: Quantiles {
            p25: quantile_sorted(&sorted, 0.25),
            p50: quantile_sorted(&sorted, 0.5),
            p75: quantile_sorted(&sorted, 0.75),
        },
    })
}

/// Makes header names unique by suffixing repeats with `.1`, `.2`, ...
fn dedupe_headers(raw: &csv::StringRecord) -> Vec<String> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    raw.iter()
        .map(|name| {
            let name = name.trim().to_string();
            let n = seen.entry(name.clone()).or_insert(0);
            let out = if *n == 0 {
                name.clone()
            } else {
                format!("{name}.{n}")
            };
            *n += 1;
            out
        })
        .collect()
}

fn file_type_of(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_else(|| "delimited".to_string())
}

fn csv_error(err: csv::Error, fallback_row: u64) -> ProfileError {
    let row = err.position().map(|p| p.record()).unwrap_or(fallback_row);
    ProfileError::ParseError {
        row,
        message: err.to_string(),
    }
}

/// Profiles a comma-separated file with a header row.
///
/// Row indices in [`ProfileError::ParseError`] are 1-based data-row numbers
/// (the header is row 0).
pub fn profile_dataset(path: &Path, sample_k: usize) -> Result<DatasetProfile, ProfileError> {
    let meta = std::fs::metadata(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ProfileError::FileNotFound(path.to_path_buf()),
        _ => ProfileError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    if !meta.is_file() {
        return Err(ProfileError::FileNotFound(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|source| ProfileError::Io {
        path: path.to_path_buf(),
        source,
    })?;

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(bytes.as_slice());
    let header = reader.headers().map_err(|e| csv_error(e, 0))?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].trim().is_empty()) {
        return Err(ProfileError::ParseError {
            row: 0,
            message: "missing header row".into(),
        });
    }
    let names = dedupe_headers(&header);

    let mut cells: Vec<Vec<String>> = vec![Vec::new(); names.len()];
    let mut sample_rows = Vec::new();
    let mut seen_rows: HashSet<Vec<String>> = HashSet::new();
    let mut duplicate_rows = 0u64;
    let mut row_count = 0u64;

    for record in reader.records() {
        let record = record.map_err(|e| csv_error(e, row_count + 1))?;
        row_count += 1;
        let trimmed: Vec<String> = record.iter().map(|f| f.trim().to_string()).collect();
        if sample_rows.len() < sample_k {
            sample_rows.push(
                names
                    .iter()
                    .cloned()
                    .zip(record.iter().map(str::to_string))
                    .collect(),
            );
        }
        for (col, value) in cells.iter_mut().zip(record.iter()) {
            col.push(value.to_string());
        }
        if !seen_rows.insert(trimmed) {
            duplicate_rows += 1;
        }
    }

    let mut columns = Vec::with_capacity(names.len());
    let mut missing_total = 0u64;
    let mut missing_columns = Vec::new();
    for (name, raw) in names.iter().zip(&cells) {
        let present: Vec<&str> = raw
            .iter()
            .map(String::as_str)
            .filter(|v| !is_missing(v))
            .collect();
        let missing_count = (raw.len() - present.len()) as u64;
        let inferred_type = infer_type(&present);
        let numeric = match inferred_type {
            ColumnType::Numeric => {
                let values: Vec<f64> = present.iter().filter_map(|v| parse_number(v)).collect();
                numeric_stats(&values)
            }
            _ => None,
        };
        if missing_count > 0 {
            missing_total += missing_count;
            missing_columns.push(format!("{name}={missing_count}"));
        }
        columns.push(ColumnProfile {
            name: name.clone(),
            inferred_type,
            missing_count,
            numeric_stats: numeric,
        });
    }

    let mut diagnostics = Vec::new();
    if missing_total > 0 {
        diagnostics.push(DiagnosticFlag {
            kind: DiagnosticKind::MissingValues,
            detail: format!("missing cells per column: {}", missing_columns.join(", ")),
            count: missing_total,
        });
    }
    if duplicate_rows > 0 {
        diagnostics.push(DiagnosticFlag {
            kind: DiagnosticKind::DuplicatedRows,
            detail: format!("{duplicate_rows} row(s) repeat an earlier row"),
            count: duplicate_rows,
        });
    }

    Ok(DatasetProfile {
        file_name: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        file_size: meta.len(),
        file_type: file_type_of(path),
        row_count,
        column_count: columns.len() as u64,
        columns,
        sample_rows,
        diagnostics,
    })
}

/// Canonical rendering: pretty JSON with lexicographically sorted keys.
pub fn render_profile(profile: &DatasetProfile) -> String {
    crate::artifacts::canonical_json(profile)
}

pub fn parse_profile(document: &str) -> Result<DatasetProfile, ProfileError> {
    Ok(serde_json::from_str(document)?)
}
