//! Control-plane side of script execution.
//!
//! Generated scripts run in a separate shim process. The shim receives one
//! [`ExecutionRequestDoc`] as JSON on stdin and answers with one
//! [`ExecutionResponseDoc`] on stdout. Everything the shim reports is
//! validated here: plots must exist inside the work directory and stdout is
//! capped regardless of what the shim did.
//!
//! [`RecordingExecutor`] and [`ReplayExecutor`] persist executions to an
//! `executions.json` log so pipelines replay without the shim installed.

use std::path::{Path, PathBuf};
use std::process::Stdio;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::io::{AsyncReadExt, AsyncWriteExt};

use crate::error::{Error, Result};
use crate::gateway::cassette::{bytes_digest, content_hash, ReplayCursor};

pub const PROTOCOL_VERSION: u32 = 1;
pub const STDOUT_CAP_BYTES: usize = 64 * 1024;
pub const TRUNCATION_MARKER: &str = "\n[output truncated]\n";
/// Fixed file name every generated script saves its figure to.
pub const PLOT_FILE: &str = "plot.png";
/// Extra time granted to the shim beyond the script timeout before it is
/// killed from this side.
pub const SHIM_GRACE: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRequestDoc {
    pub schema_version: u32,
    pub code: String,
    pub work_dir: PathBuf,
    pub dataset_path: PathBuf,
    pub timeout_secs: u64,
    pub memory_cap_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionStatus {
    Ok,
    Error,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResponseDoc {
    pub schema_version: u32,
    pub status: ExecutionStatus,
    pub stdout: String,
    pub stderr: String,
    /// Absolute, or relative to the work directory.
    pub plot_paths: Vec<PathBuf>,
    pub wall_time_secs: f64,
}

/// Validated result of one execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutput {
    pub status: ExecutionStatus,
    pub stdout: String,
    pub stderr: String,
    pub plot_paths: Vec<PathBuf>,
    pub wall_time_secs: f64,
}

impl ExecutionOutput {
    pub fn failed(status: ExecutionStatus, stderr: impl Into<String>, wall_time_secs: f64) -> Self {
        Self {
            status,
            stdout: String::new(),
            stderr: stderr.into(),
            plot_paths: Vec::new(),
            wall_time_secs,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == ExecutionStatus::Ok
    }
}

/// Truncates to at most [`STDOUT_CAP_BYTES`] on a char boundary and appends
/// the truncation marker when anything was cut.
pub fn cap_output(text: &str) -> String {
    if text.len() <= STDOUT_CAP_BYTES {
        return text.to_string();
    }
    let mut cut = STDOUT_CAP_BYTES;
    while !text.is_char_boundary(cut) {
        cut -= 1;
    }
    format!("{}{}", &text[..cut], TRUNCATION_MARKER)
}

impl ExecutionRequestDoc {
    pub fn new(code: impl Into<String>, work_dir: &Path, dataset_path: &Path, timeout_secs: u64, memory_cap_bytes: u64) -> Self {
        Self {
            schema_version: PROTOCOL_VERSION,
            code: code.into(),
            work_dir: work_dir.to_path_buf(),
            dataset_path: dataset_path.to_path_buf(),
            timeout_secs,
            memory_cap_bytes,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.timeout_secs == 0 {
            return Err("timeout must be positive".into());
        }
        if !self.work_dir.is_dir() {
            return Err(format!("work_dir {} does not exist", self.work_dir.display()));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("request document serializes")
    }
}

/// Checks a shim response against the protocol and the work directory.
/// Protocol violations become an `error` status, never a panic.
pub fn decode_response(bytes: &[u8], work_dir: &Path) -> ExecutionOutput {
    let doc: ExecutionResponseDoc = match serde_json::from_slice(bytes) {
        Ok(d) => d,
        Err(e) => {
            let shown = String::from_utf8_lossy(&bytes[..bytes.len().min(512)]).to_string();
            return ExecutionOutput::failed(
                ExecutionStatus::Error,
                format!("sandbox protocol violation: invalid response document ({e}): {shown}"),
                0.0,
            );
        }
    };
    if doc.schema_version != PROTOCOL_VERSION {
        return ExecutionOutput::failed(
            ExecutionStatus::Error,
            format!(
                "sandbox protocol violation: schema_version {} (expected {PROTOCOL_VERSION})",
                doc.schema_version
            ),
            doc.wall_time_secs,
        );
    }
    let mut stderr = doc.stderr;
    let root = work_dir.canonicalize().unwrap_or_else(|_| work_dir.to_path_buf());
    let mut plots = Vec::new();
    for reported in doc.plot_paths {
        let abs = if reported.is_absolute() { reported.clone() } else { work_dir.join(&reported) };
        match abs.canonicalize() {
            Ok(real) if real.starts_with(&root) && real.is_file() => plots.push(abs),
            Ok(_) => stderr.push_str(&format!("\n[sandbox] plot outside work dir ignored: {}", reported.display())),
            Err(_) => stderr.push_str(&format!("\n[sandbox] reported plot missing: {}", reported.display())),
        }
    }
    ExecutionOutput {
        status: doc.status,
        stdout: cap_output(&doc.stdout),
        stderr: cap_output(&stderr),
        plot_paths: plots,
        wall_time_secs: doc.wall_time_secs.max(0.0),
    }
}

#[async_trait]
pub trait Executor: Send + Sync {
    /// Script failures are reported through the output status. `Err` means
    /// the executor itself is unusable and the run cannot continue.
    async fn execute(&self, request: &ExecutionRequestDoc) -> Result<ExecutionOutput>;
}

/// Runs the configured shim command once per request.
#[derive(Debug, Clone)]
pub struct ProcessExecutor {
    command: Vec<String>,
    grace: Duration,
}

impl ProcessExecutor {
    pub fn new(command: Vec<String>) -> Result<Self> {
        if command.is_empty() || command[0].trim().is_empty() {
            return Err(Error::Config("sandbox command is empty".into()));
        }
        Ok(Self { command, grace: SHIM_GRACE })
    }

    /// Overrides [`SHIM_GRACE`].
    pub fn with_grace(mut self, grace: Duration) -> Self {
        self.grace = grace;
        self
    }
}

#[async_trait]
impl Executor for ProcessExecutor {
    async fn execute(&self, request: &ExecutionRequestDoc) -> Result<ExecutionOutput> {
        if let Err(e) = request.validate() {
            return Ok(ExecutionOutput::failed(ExecutionStatus::Error, format!("invalid request: {e}"), 0.0));
        }
        let started = Instant::now();
        let mut cmd = tokio::process::Command::new(&self.command[0]);
        cmd.args(&self.command[1..])
            .current_dir(&request.work_dir)
            .env_clear()
            .env("PATH", std::env::var_os("PATH").unwrap_or_default())
            .env("HOME", &request.work_dir)
            .env("MPLBACKEND", "Agg")
            .env("LANG", "C.UTF-8")
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .kill_on_drop(true);
        let mut child = cmd
            .spawn()
            .map_err(|e| Error::Sandbox(format!("cannot start `{}`: {e}", self.command.join(" "))))?;

        let payload = request.encode();
        let mut stdin = child.stdin.take().expect("stdin piped");
        let mut stdout = child.stdout.take().expect("stdout piped");
        let mut stderr = child.stderr.take().expect("stderr piped");
        let io = async {
            // A shim that exits without reading stdin is reported through
            // its response, not as a write error here.
            let _ = stdin.write_all(&payload).await;
            drop(stdin);
            let mut out = Vec::new();
            let mut err = Vec::new();
            let (r1, r2) = tokio::join!(stdout.read_to_end(&mut out), stderr.read_to_end(&mut err));
            r1.and(r2).map(|_| (out, err))
        };
        let limit = Duration::from_secs(request.timeout_secs) + self.grace;
        let (out, err) = match tokio::time::timeout(limit, io).await {
            Ok(Ok(streams)) => streams,
            Ok(Err(e)) => {
                let _ = child.kill().await;
                return Ok(ExecutionOutput::failed(
                    ExecutionStatus::Error,
                    format!("sandbox i/o failure: {e}"),
                    started.elapsed().as_secs_f64(),
                ));
            }
            Err(_) => {
                let _ = child.kill().await;
                return Ok(ExecutionOutput::failed(
                    ExecutionStatus::Timeout,
                    format!("sandbox shim did not answer within {}s", limit.as_secs()),
                    started.elapsed().as_secs_f64(),
                ));
            }
        };
        let status = child
            .wait()
            .await
            .map_err(|e| Error::Sandbox(format!("waiting for shim: {e}")))?;
        if !status.success() && out.is_empty() {
            return Ok(ExecutionOutput::failed(
                ExecutionStatus::Error,
                format!("sandbox shim exited with {status}: {}", String::from_utf8_lossy(&err)),
                started.elapsed().as_secs_f64(),
            ));
        }
        Ok(decode_response(&out, &request.work_dir))
    }
}

type Script = dyn Fn(&ExecutionRequestDoc) -> ExecutionResponseDoc + Send + Sync;

/// In-process executor for tests and fixture generation. The closure sees
/// the request after a wire round trip and its response is decoded with
/// the same validation as a real shim's.
#[derive(Clone)]
pub struct ScriptedExecutor {
    script: Arc<Script>,
    calls: Arc<Mutex<usize>>,
}

impl ScriptedExecutor {
    pub fn new<F>(script: F) -> Self
    where
        F: Fn(&ExecutionRequestDoc) -> ExecutionResponseDoc + Send + Sync + 'static,
    {
        Self {
            script: Arc::new(script),
            calls: Arc::new(Mutex::new(0)),
        }
    }

    pub fn calls(&self) -> usize {
        *self.calls.lock().expect("calls lock")
    }

    /// A response document with the given status and stdout that, when
    /// `plot` is set, also writes those bytes to `plot.png` in the work dir.
    pub fn respond(request: &ExecutionRequestDoc, status: ExecutionStatus, stdout: &str, plot: Option<&[u8]>) -> ExecutionResponseDoc {
        let mut plot_paths = Vec::new();
        if let Some(bytes) = plot {
            std::fs::write(request.work_dir.join(PLOT_FILE), bytes).expect("scripted plot write");
            plot_paths.push(PathBuf::from(PLOT_FILE));
        }
        ExecutionResponseDoc {
            schema_version: PROTOCOL_VERSION,
            status,
            stdout: stdout.to_string(),
            stderr: if status == ExecutionStatus::Ok { String::new() } else { "Traceback: scripted failure".into() },
            plot_paths,
            wall_time_secs: 0.25,
        }
    }
}

#[async_trait]
impl Executor for ScriptedExecutor {
    async fn execute(&self, request: &ExecutionRequestDoc) -> Result<ExecutionOutput> {
        *self.calls.lock().expect("calls lock") += 1;
        let wire: ExecutionRequestDoc =
            serde_json::from_slice(&request.encode()).map_err(|e| Error::Sandbox(e.to_string()))?;
        let response = (self.script)(&wire);
        let bytes = serde_json::to_vec(&response).map_err(|e| Error::Sandbox(e.to_string()))?;
        Ok(decode_response(&bytes, &request.work_dir))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedPlot {
    /// Path relative to the work directory.
    pub file: String,
    pub base64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionEntry {
    pub fingerprint: String,
    pub dataset_file: String,
    pub status: ExecutionStatus,
    pub stdout: String,
    pub stderr: String,
    pub plots: Vec<RecordedPlot>,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionLog {
    pub version: u32,
    pub entries: Vec<ExecutionEntry>,
}

impl Default for ExecutionLog {
    fn default() -> Self {
        Self {
            version: PROTOCOL_VERSION,
            entries: Vec::new(),
        }
    }
}

impl ExecutionLog {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Sandbox(format!("bad execution log {}: {e}", path.display())))
    }

    /// Entries are stably sorted by fingerprint, as for model cassettes.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut sorted = self.clone();
        sorted.entries.sort_by(|a, b| a.fingerprint.cmp(&b.fingerprint));
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, crate::artifacts::canonical_json(&sorted)).map_err(|e| Error::io(path, e))
    }
}

/// Replay key of an execution: the code plus the dataset's name and
/// content, never its location.
pub fn execution_fingerprint(request: &ExecutionRequestDoc) -> Result<(String, String)> {
    let bytes = std::fs::read(&request.dataset_path).map_err(|e| Error::io(&request.dataset_path, e))?;
    let name = request
        .dataset_path
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_default();
    let fp = content_hash(&json!({
        "code": request.code,
        "dataset_file": name,
        "dataset_digest": bytes_digest(&bytes),
    }));
    Ok((fp, name))
}

/// Wraps another executor and logs every execution, plot bytes included.
pub struct RecordingExecutor {
    inner: Arc<dyn Executor>,
    log: Mutex<ExecutionLog>,
}

impl RecordingExecutor {
    pub fn new(inner: Arc<dyn Executor>) -> Self {
        Self {
            inner,
            log: Mutex::new(ExecutionLog::default()),
        }
    }

    pub fn log(&self) -> ExecutionLog {
        self.log.lock().expect("log lock").clone()
    }
}

#[async_trait]
impl Executor for RecordingExecutor {
    async fn execute(&self, request: &ExecutionRequestDoc) -> Result<ExecutionOutput> {
        let (fingerprint, dataset_file) = execution_fingerprint(request)?;
        let output = self.inner.execute(request).await?;
        let mut plots = Vec::new();
        for p in &output.plot_paths {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            let rel = p.strip_prefix(&request.work_dir).unwrap_or(p);
            plots.push(RecordedPlot {
                file: rel.to_string_lossy().replace('\\', "/"),
                base64: base64::engine::general_purpose::STANDARD.encode(bytes),
            });
        }
        self.log.lock().expect("log lock").entries.push(ExecutionEntry {
            fingerprint,
            dataset_file,
            status: output.status,
            stdout: output.stdout.clone(),
            stderr: output.stderr.clone(),
            plots,
            wall_time_secs: output.wall_time_secs,
        });
        Ok(output)
    }
}

/// Answers executions from a recorded log; an unknown script is fatal.
pub struct ReplayExecutor {
    log: ExecutionLog,
    cursor: Mutex<ReplayCursor>,
}

impl ReplayExecutor {
    pub fn new(log: ExecutionLog) -> Self {
        let cursor = ReplayCursor::from_fingerprints(log.entries.iter().map(|e| e.fingerprint.as_str()));
        Self {
            log,
            cursor: Mutex::new(cursor),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(ExecutionLog::load(path)?))
    }
}

#[async_trait]
impl Executor for ReplayExecutor {
    async fn execute(&self, request: &ExecutionRequestDoc) -> Result<ExecutionOutput> {
        let (fingerprint, _) = execution_fingerprint(request)?;
        let pos = self
            .cursor
            .lock()
            .expect("cursor lock")
            .next_position(&fingerprint)
            .ok_or_else(|| Error::Sandbox(format!("execution log miss (fingerprint {fingerprint})")))?;
        let entry = &self.log.entries[pos];
        let mut plot_paths = Vec::new();
        for plot in &entry.plots {
            let rel = Path::new(&plot.file);
            if rel.is_absolute() || rel.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
                return Err(Error::Sandbox(format!("recorded plot path escapes work dir: {}", plot.file)));
            }
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(&plot.base64)
                .map_err(|e| Error::Sandbox(format!("recorded plot {}: {e}", plot.file)))?;
            let path = request.work_dir.join(rel);
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            plot_paths.push(path);
        }
        Ok(ExecutionOutput {
            status: entry.status,
            stdout: entry.stdout.clone(),
            stderr: entry.stderr.clone(),
            plot_paths,
            wall_time_secs: entry.wall_time_secs,
        })
    }
}

/// Creates `<run_dir>/questions/<question_id>/versions/<version>/work`
/// holding only a read-only copy of the dataset. Refuses to reuse a
/// directory and never creates `run_dir` itself.
pub fn prepare_workdir(run_dir: &Path, question_id: &str, version_index: usize, dataset_path: &Path) -> Result<PathBuf> {
    if !run_dir.is_dir() {
        return Err(Error::io(
            run_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "run directory does not exist"),
        ));
    }
    let version_dir = run_dir
        .join(crate::artifacts::QUESTIONS_DIR)
        .join(question_id)
        .join("versions")
        .join(version_index.to_string());
    std::fs::create_dir_all(&version_dir).map_err(|e| Error::io(&version_dir, e))?;
    let work = version_dir.join("work");
    std::fs::create_dir(&work).map_err(|e| Error::io(&work, e))?;
    let name = dataset_path
        .file_name()
        .ok_or_else(|| Error::Contract(format!("dataset path {} has no file name", dataset_path.display())))?;
    let copy = work.join(name);
    std::fs::copy(dataset_path, &copy).map_err(|e| Error::io(&copy, e))?;
    let mut perms = std::fs::metadata(&copy).map_err(|e| Error::io(&copy, e))?.permissions();
    perms.set_readonly(true);
    std::fs::set_permissions(&copy, perms).map_err(|e| Error::io(&copy, e))?;
    Ok(work)
}
