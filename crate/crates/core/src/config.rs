//! Run configuration, loadable from a TOML file.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::ModelSettings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Live,
    Record,
    Replay,
}

impl std::str::FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(RunMode::Live),
            "record" => Ok(RunMode::Record),
            "replay" => Ok(RunMode::Replay),
            other => Err(format!("unknown mode `{other}` (expected live, record or replay)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SandboxLimits {
    pub timeout_secs: u64,
    pub memory_cap_bytes: u64,
    /// Shim command line; the request document is written to its stdin.
    pub command: Vec<String>,
}

impl Default for SandboxLimits {
    fn default() -> Self {
        Self {
            timeout_secs: 120,
            memory_cap_bytes: 2 * 1024 * 1024 * 1024,
            command: vec!["insightloop-sandbox".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n_iter: usize,
    pub n_q: usize,
    pub n_r: usize,
    pub n_fix: usize,
    pub select_s: usize,
    pub per_role_m: usize,
    pub sample_k: usize,
    pub per_query_k: usize,
    /// Search results dated after this day are discarded. Required.
    pub max_date: Option<NaiveDate>,
    /// Answer the selected questions of one iteration concurrently.
    pub parallel_questions: bool,
    /// Not echoed either, so a recorded run and its replay match byte for byte.
    #[serde(skip_serializing)]
    pub mode: RunMode,
    pub model: ModelSettings,
    pub sandbox: SandboxLimits,
    /// Not echoed into the run report: two runs of one cassette into
    /// different directories must produce identical reports.
    #[serde(skip_serializing)]
    pub run_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_iter: 6,
            n_q: 3,
            n_r: 3,
            n_fix: 5,
            select_s: 2,
            per_role_m: 3,
            sample_k: 5,
            per_query_k: 5,
            max_date: None,
            parallel_questions: false,
            mode: RunMode::Live,
            model: ModelSettings::default(),
            sandbox: SandboxLimits::default(),
            run_dir: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_iter", self.n_iter),
            ("n_q", self.n_q),
            ("n_r", self.n_r),
            ("n_fix", self.n_fix),
            ("select_s", self.select_s),
            ("per_role_m", self.per_role_m),
            ("sample_k", self.sample_k),
            ("per_query_k", self.per_query_k),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.max_date.is_none() {
            return Err(Error::Config("max_date is required (YYYY-MM-DD)".into()));
        }
        if self.sandbox.timeout_secs == 0 {
            return Err(Error::Config("sandbox.timeout_secs must be positive".into()));
        }
        if !(self.model.temperature >= 0.0) {
            return Err(Error::Config("model.temperature must be >= 0".into()));
        }
        Ok(())
    }

    pub fn max_date(&self) -> NaiveDate {
        self.max_date.expect("validated config carries max_date")
    }
}
