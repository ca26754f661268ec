//! Single chokepoint for model completions, embeddings and web search.
//!
//! Every agent call goes through [`Gateway`]. In `record` mode calls reach the
//! configured backends and are appended to a [`Cassette`]; in `replay` mode
//! they are answered from the cassette by content fingerprint and a miss is an
//! error; `passthrough` talks to the backends without recording.

pub mod cassette;
pub mod http;
pub mod scripted;
pub mod structured;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use cassette::{Cassette, CassetteEntry, RecordedResponse};

use crate::eval::EmbeddingVector;
use cassette::{bytes_digest, content_hash, ReplayCursor};

/// Structured-output parse failures are retried this many times.
pub const DEFAULT_SCHEMA_RETRIES: usize = 2;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("agent `{role}` produced unusable output after {attempts} attempt(s): {message}")]
    Schema {
        role: String,
        attempts: usize,
        message: String,
    },
    #[error("cassette miss for `{role}` (fingerprint {fingerprint})")]
    CassetteMiss { role: String, fingerprint: String },
    #[error("cassette unavailable at {path}: {message}")]
    CassetteUnavailable { path: String, message: String },
    #[error("embedding dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no backend configured for {0}")]
    NotConfigured(&'static str),
}

impl GatewayError {
    /// Errors that abort a run instead of triggering a degraded fallback.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            GatewayError::CassetteMiss { .. }
                | GatewayError::CassetteUnavailable { .. }
                | GatewayError::NotConfigured(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CassetteMode {
    Record,
    Replay,
    Passthrough,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    Completion,
    Embedding,
    Search,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub max_output: u32,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_output: 4096,
        }
    }
}

/// An image passed alongside a prompt. Identified by content digest so the
/// fingerprint does not depend on where the file lives.
#[derive(Debug, Clone, PartialEq)]
pub struct Attachment {
    pub label: String,
    pub media_type: String,
    pub digest: String,
    pub bytes: Arc<Vec<u8>>,
}

impl Attachment {
    pub fn from_bytes(label: impl Into<String>, bytes: Vec<u8>) -> Self {
        let media_type = match image::guess_format(&bytes) {
            Ok(image::ImageFormat::Jpeg) => "image/jpeg",
            _ => "image/png",
        };
        Self {
            label: label.into(),
            media_type: media_type.to_string(),
            digest: bytes_digest(&bytes),
            bytes: Arc::new(bytes),
        }
    }

    pub fn from_file(path: &Path, label: impl Into<String>) -> std::io::Result<Self> {
        Ok(Self::from_bytes(label, std::fs::read(path)?))
    }

    /// Like [`Attachment::from_file`] but rejects files that do not decode
    /// as a raster image.
    pub fn from_image_file(path: &Path, label: impl Into<String>) -> Result<Self, String> {
        let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
        image::load_from_memory(&bytes).map_err(|e| e.to_string())?;
        Ok(Self::from_bytes(label, bytes))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRequest {
    /// Agent persona issuing the call, e.g. `code_reviewer` or
    /// `question_raiser:Churn Analyst`.
    pub role_name: String,
    pub prompt: String,
    pub attachments: Vec<Attachment>,
    pub decoding: Decoding,
}

impl ModelRequest {
    pub fn new(role_name: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            role_name: role_name.into(),
            prompt: prompt.into(),
            attachments: Vec::new(),
            decoding: Decoding::default(),
        }
    }

    pub fn with_attachments(mut self, attachments: Vec<Attachment>) -> Self {
        self.attachments = attachments;
        self
    }

    pub fn with_decoding(mut self, decoding: Decoding) -> Self {
        self.decoding = decoding;
        self
    }

    /// Agent kind used for per-agent model overrides (text before `:`).
    pub fn agent_kind(&self) -> &str {
        self.role_name.split(':').next().unwrap_or(&self.role_name)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.prompt.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("empty prompt".into()));
        }
        if !(self.decoding.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature must be >= 0, got {}",
                self.decoding.temperature
            )));
        }
        if self.decoding.max_output == 0 {
            return Err(GatewayError::InvalidRequest("max_output must be positive".into()));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let mut digests: Vec<&str> = self.attachments.iter().map(|a| a.digest.as_str()).collect();
        digests.sort_unstable();
        content_hash(&json!({
            "kind": "completion",
            "role_name": self.role_name,
            "prompt": self.prompt,
            "attachments": digests,
        }))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelResponse {
    pub text: String,
    /// Set only when the calling agent's schema check accepted the reply.
    pub parsed: Option<Value>,
    pub usage: Usage,
}

/// A schema-checked agent reply.
#[derive(Debug, Clone)]
pub struct Structured<T> {
    pub value: T,
    pub response: ModelResponse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchQuery {
    pub query: String,
    pub max_date: Option<NaiveDate>,
    pub k: usize,
}

impl SearchQuery {
    pub fn fingerprint(&self) -> String {
        content_hash(&json!({
            "kind": "search",
            "query": self.query,
            "max_date": self.max_date,
            "k": self.k,
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    pub title: String,
    pub snippet: String,
    pub url: String,
    pub date: Option<NaiveDate>,
}

#[async_trait]
pub trait ModelBackend: Send + Sync {
    async fn complete(&self, model: &str, request: &ModelRequest) -> Result<(String, Usage), GatewayError>;
    async fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError>;
}

#[async_trait]
pub trait SearchProvider: Send + Sync {
    async fn search(&self, query: &SearchQuery) -> Result<Vec<SearchHit>, GatewayError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub base_url: String,
    pub model: String,
    pub embedding_model: String,
    /// Per-agent model override keyed by agent kind (e.g. `interpreter`).
    pub agent_models: BTreeMap<String, String>,
    pub temperature: f64,
    pub max_output: u32,
    pub schema_retries: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o-2024-08-06".into(),
            embedding_model: "text-embedding-3-small".into(),
            agent_models: BTreeMap::new(),
            temperature: 0.0,
            max_output: 4096,
            schema_retries: DEFAULT_SCHEMA_RETRIES,
        }
    }
}

impl ModelSettings {
    pub fn model_for(&self, agent_kind: &str) -> &str {
        self.agent_models
            .get(agent_kind)
            .map(String::as_str)
            .unwrap_or(&self.model)
    }

    pub fn decoding(&self) -> Decoding {
        Decoding {
            temperature: self.temperature,
            max_output: self.max_output,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub kind: CallKind,
    pub role_name: String,
    pub fingerprint: String,
}

struct ReplayState {
    cassette: Cassette,
    cursor: ReplayCursor,
}

pub struct Gateway {
    mode: CassetteMode,
    settings: ModelSettings,
    backend: Option<Arc<dyn ModelBackend>>,
    search: Option<Arc<dyn SearchProvider>>,
    replay: Mutex<ReplayState>,
    recorded: Mutex<Cassette>,
    log: Mutex<Vec<CallRecord>>,
    cassette_path: Option<PathBuf>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("mode", &self.mode)
            .field("calls", &self.log.lock().map(|l| l.len()).unwrap_or(0))
            .finish()
    }
}

impl Gateway {
    fn build(
        mode: CassetteMode,
        settings: ModelSettings,
        backend: Option<Arc<dyn ModelBackend>>,
        search: Option<Arc<dyn SearchProvider>>,
        replay: Cassette,
    ) -> Self {
        let cursor = ReplayCursor::new(&replay);
        Self {
            mode,
            settings,
            backend,
            search,
            replay: Mutex::new(ReplayState {
                cassette: replay,
                cursor,
            }),
            recorded: Mutex::new(Cassette::default()),
            log: Mutex::new(Vec::new()),
            cassette_path: None,
        }
    }

    pub fn replay(cassette: Cassette, settings: ModelSettings) -> Self {
        Self::build(CassetteMode::Replay, settings, None, None, cassette)
    }

    pub fn replay_from(path: &Path, settings: ModelSettings) -> Result<Self, GatewayError> {
        let mut gw = Self::replay(Cassette::load(path)?, settings);
        gw.cassette_path = Some(path.to_path_buf());
        Ok(gw)
    }

    pub fn record(
        backend: Arc<dyn ModelBackend>,
        search: Option<Arc<dyn SearchProvider>>,
        settings: ModelSettings,
    ) -> Self {
        Self::build(CassetteMode::Record, settings, Some(backend), search, Cassette::default())
    }

    pub fn passthrough(
        backend: Arc<dyn ModelBackend>,
        search: Option<Arc<dyn SearchProvider>>,
        settings: ModelSettings,
    ) -> Self {
        Self::build(
            CassetteMode::Passthrough,
            settings,
            Some(backend),
            search,
            Cassette::default(),
        )
    }

    pub fn mode(&self) -> CassetteMode {
        self.mode
    }

    pub fn settings(&self) -> &ModelSettings {
        &self.settings
    }

    /// Path the replay cassette was loaded from, if any.
    pub fn cassette_path(&self) -> Option<&Path> {
        self.cassette_path.as_deref()
    }

    /// Builds a request carrying the configured decoding parameters.
    pub fn request(&self, role_name: impl Into<String>, prompt: impl Into<String>) -> ModelRequest {
        ModelRequest::new(role_name, prompt).with_decoding(self.settings.decoding())
    }

    /// Entries appended in record mode, in call order.
    pub fn recorded(&self) -> Cassette {
        self.recorded.lock().expect("cassette lock").clone()
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.log.lock().expect("log lock").clone()
    }

    pub fn call_count(&self, kind: CallKind) -> usize {
        self.log
            .lock()
            .expect("log lock")
            .iter()
            .filter(|c| c.kind == kind)
            .count()
    }

    fn log_call(&self, kind: CallKind, role_name: &str, fingerprint: &str) {
        self.log.lock().expect("log lock").push(CallRecord {
            kind,
            role_name: role_name.to_string(),
            fingerprint: fingerprint.to_string(),
        });
    }

    fn lookup(&self, kind: CallKind, role: &str, fingerprint: &str) -> Result<RecordedResponse, GatewayError> {
        let mut state = self.replay.lock().expect("replay lock");
        let miss = || GatewayError::CassetteMiss {
            role: role.to_string(),
            fingerprint: fingerprint.to_string(),
        };
        let pos = state.cursor.next_position(fingerprint).ok_or_else(miss)?;
        let entry = &state.cassette.entries[pos];
        if entry.kind != kind {
            return Err(miss());
        }
        Ok(entry.response.clone())
    }

    fn append(&self, fingerprint: String, kind: CallKind, request: Value, response: RecordedResponse) {
        self.recorded
            .lock()
            .expect("cassette lock")
            .push(CassetteEntry {
                fingerprint,
                kind,
                request,
                response,
            });
    }

    fn backend(&self) -> Result<&Arc<dyn ModelBackend>, GatewayError> {
        self.backend.as_ref().ok_or(GatewayError::NotConfigured("model backend"))
    }

    pub async fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        request.validate()?;
        let fingerprint = request.fingerprint();
        self.log_call(CallKind::Completion, &request.role_name, &fingerprint);
        let (text, usage) = match self.mode {
            CassetteMode::Replay => {
                match self.lookup(CallKind::Completion, &request.role_name, &fingerprint)? {
                    RecordedResponse::Completion { text, usage } => (text, usage),
                    RecordedResponse::Failure { message } => return Err(GatewayError::Transport(message)),
                    _ => unreachable!("kind checked in lookup"),
                }
            }
            CassetteMode::Record | CassetteMode::Passthrough => {
                let model = self.settings.model_for(request.agent_kind()).to_string();
                let result = self.backend()?.complete(&model, request).await;
                if self.mode == CassetteMode::Record {
                    let echo = json!({
                        "role_name": request.role_name,
                        "prompt": request.prompt,
                        "attachments": request.attachments.iter().map(|a| json!({"label": a.label, "digest": a.digest})).collect::<Vec<_>>(),
                    });
                    let recorded = match &result {
                        Ok((text, usage)) => RecordedResponse::Completion {
                            text: text.clone(),
                            usage: *usage,
                        },
                        Err(e) => RecordedResponse::Failure { message: e.to_string() },
                    };
                    self.append(fingerprint, CallKind::Completion, echo, recorded);
                }
                result?
            }
        };
        Ok(ModelResponse {
            text,
            parsed: None,
            usage,
        })
    }

    /// Completion whose reply must contain a JSON block deserializing to `T`
    /// and passing `check`. Retries up to `schema_retries` times.
    pub async fn complete_json<T, F>(&self, request: &ModelRequest, check: F) -> Result<Structured<T>, GatewayError>
    where
        T: DeserializeOwned,
        F: Fn(&T) -> Result<(), String>,
    {
        let attempts = self.settings.schema_retries + 1;
        let mut last = String::new();
        for attempt in 1..=attempts {
            let mut response = self.complete(request).await?;
            let parsed = structured::extract_json(&response.text).and_then(|value| {
                let typed: T = serde_json::from_value(value.clone()).map_err(|e| format!("schema mismatch: {e}"))?;
                check(&typed)?;
                Ok((typed, value))
            });
            match parsed {
                Ok((value, raw)) => {
                    response.parsed = Some(raw);
                    return Ok(Structured { value, response });
                }
                Err(message) => {
                    tracing::debug!(role = %request.role_name, attempt, %message, "structured output rejected");
                    last = message;
                }
            }
        }
        Err(GatewayError::Schema {
            role: request.role_name.clone(),
            attempts,
            message: last,
        })
    }

    pub async fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::InvalidRequest("no texts to embed".into()));
        }
        let fingerprint = content_hash(&json!({"kind": "embedding", "texts": texts}));
        self.log_call(CallKind::Embedding, "embedder", &fingerprint);
        let vectors = match self.mode {
            CassetteMode::Replay => match self.lookup(CallKind::Embedding, "embedder", &fingerprint)? {
                RecordedResponse::Embedding { vectors } => vectors,
                RecordedResponse::Failure { message } => return Err(GatewayError::Transport(message)),
                _ => unreachable!("kind checked in lookup"),
            },
            CassetteMode::Record | CassetteMode::Passthrough => {
                let model = self.settings.embedding_model.clone();
                let result = self.backend()?.embed(&model, texts).await;
                if self.mode == CassetteMode::Record {
                    let recorded = match &result {
                        Ok(v) => RecordedResponse::Embedding { vectors: v.clone() },
                        Err(e) => RecordedResponse::Failure { message: e.to_string() },
                    };
                    self.append(fingerprint, CallKind::Embedding, json!({"texts": texts}), recorded);
                }
                result?
            }
        };
        if vectors.len() != texts.len() {
            return Err(GatewayError::DimensionMismatch(format!(
                "{} texts but {} vectors",
                texts.len(),
                vectors.len()
            )));
        }
        let dim = vectors.first().map(Vec::len).unwrap_or(0);
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(GatewayError::DimensionMismatch("ragged embedding vectors".into()));
        }
        Ok(vectors.into_iter().map(EmbeddingVector::new).collect())
    }

    pub async fn search(&self, query: &SearchQuery) -> Result<Vec<SearchHit>, GatewayError> {
        let fingerprint = query.fingerprint();
        self.log_call(CallKind::Search, "search", &fingerprint);
        match self.mode {
            CassetteMode::Replay => match self.lookup(CallKind::Search, "search", &fingerprint)? {
                RecordedResponse::Search { hits } => Ok(hits),
                RecordedResponse::Failure { message } => Err(GatewayError::Transport(message)),
                _ => unreachable!("kind checked in lookup"),
            },
            CassetteMode::Record | CassetteMode::Passthrough => {
                let provider = self.search.as_ref().ok_or(GatewayError::NotConfigured("search provider"))?;
                let result = provider.search(query).await;
                if self.mode == CassetteMode::Record {
                    let recorded = match &result {
                        Ok(hits) => RecordedResponse::Search { hits: hits.clone() },
                        Err(e) => RecordedResponse::Failure { message: e.to_string() },
                    };
                    self.append(fingerprint, CallKind::Search, serde_json::to_value(query).unwrap_or_default(), recorded);
                }
                result
            }
        }
    }
}
