//! In-process backends driven by closures. Used to build cassettes and to
//! script agent behaviour in tests without any network access.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use async_trait::async_trait;

use super::{GatewayError, ModelBackend, ModelRequest, SearchHit, SearchProvider, SearchQuery, Usage};

type Responder = dyn Fn(&ModelRequest) -> Result<String, String> + Send + Sync;
type Embedder = dyn Fn(&[String]) -> Vec<Vec<f64>> + Send + Sync;
type Searcher = dyn Fn(&SearchQuery) -> Result<Vec<SearchHit>, String> + Send + Sync;

#[derive(Clone)]
pub struct ScriptedBackend {
    responder: Arc<Responder>,
    embedder: Arc<Embedder>,
    calls: Arc<AtomicUsize>,
}

impl ScriptedBackend {
    /// `responder` returns the raw reply text, or `Err` to simulate a
    /// transport failure.
    pub fn new<F>(responder: F) -> Self
    where
        F: Fn(&ModelRequest) -> Result<String, String> + Send + Sync + 'static,
    {
        Self {
            responder: Arc::new(responder),
            embedder: Arc::new(|texts: &[String]| texts.iter().map(|_| vec![1.0]).collect()),
            calls: Arc::new(AtomicUsize::new(0)),
        }
    }

    pub fn with_embedder<F>(mut self, embedder: F) -> Self
    where
        F: Fn(&[String]) -> Vec<Vec<f64>> + Send + Sync + 'static,
    {
        self.embedder = Arc::new(embedder);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl ModelBackend for ScriptedBackend {
    async fn complete(&self, _model: &str, request: &ModelRequest) -> Result<(String, Usage), GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let text = (self.responder)(request).map_err(GatewayError::Transport)?;
        let usage = Usage {
            prompt_tokens: request.prompt.split_whitespace().count() as u64,
            completion_tokens: text.split_whitespace().count() as u64,
        };
        Ok((text, usage))
    }

    async fn embed(&self, _model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok((self.embedder)(texts))
    }
}

#[derive(Clone)]
pub struct ScriptedSearch {
    searcher: Arc<Searcher>,
    calls: Arc<AtomicUsize>,
}

impl ScriptedSearch {
    pub fn new<F>(searcher: F) -> Self
    where
        F: Fn(&SearchQuery) -> Result<Vec<SearchHit>, String> + Send + Sync + 'static,
    {
        Self {
            searcher: Arc::new(searcher),
            calls: Arc::new(AtomicUsize::new(0)),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl SearchProvider for ScriptedSearch {
    async fn search(&self, query: &SearchQuery) -> Result<Vec<SearchHit>, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.searcher)(query).map_err(GatewayError::Transport)
    }
}

/// Wraps a JSON payload in the fenced block agents are asked to emit.
pub fn fenced_json(value: &serde_json::Value) -> String {
    format!("```json\n{}\n```", serde_json::to_string_pretty(value).expect("json renders"))
}
