//! Network backends: an OpenAI-compatible chat/embeddings endpoint and the
//! Serper web search API.

use async_trait::async_trait;
use base64::Engine;
use chrono::NaiveDate;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{GatewayError, ModelBackend, ModelRequest, SearchHit, SearchProvider, SearchQuery, Usage};

pub const API_KEY_ENV: &str = "INSIGHTLOOP_API_KEY";
pub const API_KEY_FALLBACK_ENV: &str = "OPENAI_API_KEY";
pub const SEARCH_KEY_ENV: &str = "SERPER_API_KEY";
pub const SERPER_URL: &str = "https://google.serper.dev/search";

fn transport(e: impl std::fmt::Display) -> GatewayError {
    GatewayError::Transport(e.to_string())
}

#[derive(Debug, Clone)]
pub struct OpenAiCompatible {
    client: reqwest::Client,
    base_url: String,
    api_key: String,
}

impl OpenAiCompatible {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self {
            client: reqwest::Client::new(),
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
        }
    }

    /// Reads the key from `INSIGHTLOOP_API_KEY`, falling back to `OPENAI_API_KEY`.
    pub fn from_env(base_url: impl Into<String>) -> Result<Self, GatewayError> {
        let key = std::env::var(API_KEY_ENV)
            .or_else(|_| std::env::var(API_KEY_FALLBACK_ENV))
            .map_err(|_| GatewayError::NotConfigured("model API key (INSIGHTLOOP_API_KEY)"))?;
        Ok(Self::new(base_url, key))
    }

    pub fn chat_body(model: &str, request: &ModelRequest) -> Value {
        let mut content = vec![json!({"type": "text", "text": request.prompt})];
        for a in &request.attachments {
            let data = base64::engine::general_purpose::STANDARD.encode(a.bytes.as_slice());
            content.push(json!({
                "type": "image_url",
                "image_url": {"url": format!("data:{};base64,{}", a.media_type, data)}
            }));
        }
        json!({
            "model": model,
            "temperature": request.decoding.temperature,
            "max_tokens": request.decoding.max_output,
            "messages": [{"role": "user", "content": content}],
        })
    }

    async fn post(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let resp = self
            .client
            .post(format!("{}/{}", self.base_url, path))
            .bearer_auth(&self.api_key)
            .json(body)
            .send()
            .await
            .map_err(transport)?;
        let status = resp.status();
        let payload: Value = resp.json().await.map_err(transport)?;
        if !status.is_success() {
            return Err(GatewayError::Transport(format!("HTTP {status}: {payload}")));
        }
        Ok(payload)
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    index: usize,
    embedding: Vec<f64>,
}

#[async_trait]
impl ModelBackend for OpenAiCompatible {
    async fn complete(&self, model: &str, request: &ModelRequest) -> Result<(String, Usage), GatewayError> {
        let payload = self.post("chat/completions", &Self::chat_body(model, request)).await?;
        let parsed: ChatResponse = serde_json::from_value(payload).map_err(transport)?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| GatewayError::Transport("response carried no message content".into()))?;
        let usage = parsed
            .usage
            .map(|u| Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            })
            .unwrap_or_default();
        Ok((text, usage))
    }

    async fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        let payload = self.post("embeddings", &json!({"model": model, "input": texts})).await?;
        let mut parsed: EmbeddingResponse = serde_json::from_value(payload).map_err(transport)?;
        parsed.data.sort_by_key(|d| d.index);
        Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
    }
}

#[derive(Debug, Clone)]
pub struct SerperSearch {
    client: reqwest::Client,
    url: String,
    api_key: String,
}

impl SerperSearch {
    pub fn new(api_key: impl Into<String>) -> Self {
        Self::with_url(SERPER_URL, api_key)
    }

    pub fn with_url(url: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self {
            client: reqwest::Client::new(),
            url: url.into(),
            api_key: api_key.into(),
        }
    }

    pub fn from_env() -> Result<Self, GatewayError> {
        let key = std::env::var(SEARCH_KEY_ENV).map_err(|_| GatewayError::NotConfigured("search API key (SERPER_API_KEY)"))?;
        Ok(Self::new(key))
    }

    pub fn request_body(query: &SearchQuery) -> Value {
        let mut body = json!({"q": query.query, "num": query.k});
        if let Some(max) = query.max_date {
            body["tbs"] = json!(format!("cdr:1,cd_max:{}", max.format("%m/%d/%Y")));
        }
        body
    }
}

/// Parses the loosely formatted dates search providers attach to results.
/// Relative dates ("3 days ago") are left undated.
pub fn parse_result_date(raw: &str) -> Option<NaiveDate> {
    let raw = raw.trim();
    ["%b %d, %Y", "%B %d, %Y", "%Y-%m-%d", "%d %b %Y", "%m/%d/%Y"]
        .iter()
        .find_map(|layout| NaiveDate::parse_from_str(raw, layout).ok())
}

#[derive(Deserialize)]
struct SerperResponse {
    #[serde(default)]
    organic: Vec<SerperItem>,
}

#[derive(Deserialize)]
struct SerperItem {
    #[serde(default)]
    title: String,
    #[serde(default)]
    link: String,
    #[serde(default)]
    snippet: String,
    #[serde(default)]
    date: Option<String>,
}

#[async_trait]
impl SearchProvider for SerperSearch {
    async fn search(&self, query: &SearchQuery) -> Result<Vec<SearchHit>, GatewayError> {
        let resp = self
            .client
            .post(&self.url)
            .header("X-API-KEY", &self.api_key)
            .json(&Self::request_body(query))
            .send()
            .await
            .map_err(transport)?;
        let status = resp.status();
        if !status.is_success() {
            return Err(GatewayError::Transport(format!("search HTTP {status}")));
        }
        let parsed: SerperResponse = resp.json().await.map_err(transport)?;
        Ok(parsed
            .organic
            .into_iter()
            .map(|item| SearchHit {
                title: item.title,
                snippet: item.snippet,
                url: item.link,
                date: item.date.as_deref().and_then(parse_result_date),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::Attachment;
    use axum::routing::post;
    use axum::{Json, Router};

    async fn serve(router: Router) -> String {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(async move {
            axum::serve(listener, router).await.unwrap();
        });
        format!("http://{addr}")
    }

    #[test]
    fn chat_body_embeds_images_as_data_urls() {
        let req = ModelRequest::new("interpreter", "describe")
            .with_attachments(vec![Attachment::from_bytes("plot.png", vec![0x89, b'P', b'N', b'G'])]);
        let body = OpenAiCompatible::chat_body("m", &req);
        assert_eq!(body["temperature"], 0.0);
        let parts = body["messages"][0]["content"].as_array().unwrap();
        assert_eq!(parts.len(), 2);
        assert!(parts[1]["image_url"]["url"].as_str().unwrap().starts_with("data:image/png;base64,"));
    }

    #[test]
    fn serper_body_carries_date_cap() {
        let q = SearchQuery {
            query: "retail seasonality".into(),
            max_date: NaiveDate::from_ymd_opt(2024, 6, 30),
            k: 5,
        };
        let body = SerperSearch::request_body(&q);
        assert_eq!(body["tbs"], "cdr:1,cd_max:06/30/2024");
        assert_eq!(body["num"], 5);
    }

    #[test]
    fn result_dates() {
        assert_eq!(parse_result_date("Mar 3, 2023"), NaiveDate::from_ymd_opt(2023, 3, 3));
        assert_eq!(parse_result_date("2024-01-31"), NaiveDate::from_ymd_opt(2024, 1, 31));
        assert_eq!(parse_result_date("2 days ago"), None);
    }

    #[tokio::test]
    async fn openai_compatible_round_trip() {
        let router = Router::new()
            .route(
                "/v1/chat/completions",
                post(|Json(body): Json<Value>| async move {
                    let prompt = body["messages"][0]["content"][0]["text"].as_str().unwrap_or("").to_string();
                    Json(json!({
                        "choices": [{"message": {"role": "assistant", "content": format!("echo: {prompt}")}}],
                        "usage": {"prompt_tokens": 3, "completion_tokens": 2}
                    }))
                }),
            )
            .route(
                "/v1/embeddings",
                post(|Json(body): Json<Value>| async move {
                    let n = body["input"].as_array().map(|a| a.len()).unwrap_or(0);
                    let data: Vec<Value> = (0..n).rev().map(|i| json!({"index": i, "embedding": [i as f64, 1.0]})).collect();
                    Json(json!({"data": data}))
                }),
            );
        let base = serve(router).await;
        let backend = OpenAiCompatible::new(format!("{base}/v1/"), "k");
        let (text, usage) = backend.complete("m", &ModelRequest::new("r", "hello")).await.unwrap();
        assert_eq!(text, "echo: hello");
        assert_eq!(usage.prompt_tokens, 3);
        let v = backend.embed("e", &["a".into(), "b".into()]).await.unwrap();
        assert_eq!(v, vec![vec![0.0, 1.0], vec![1.0, 1.0]]);
    }

    #[tokio::test]
    async fn serper_maps_organic_results() {
        let router = Router::new().route(
            "/search",
            post(|| async {
                Json(json!({"organic": [
                    {"title": "t", "link": "https://a.example", "snippet": "s", "date": "Jan 5, 2024"},
                    {"title": "u", "link": "https://b.example", "snippet": "s2"}
                ]}))
            }),
        );
        let base = serve(router).await;
        let search = SerperSearch::with_url(format!("{base}/search"), "k");
        let hits = search
            .search(&SearchQuery {
                query: "q".into(),
                max_date: None,
                k: 5,
            })
            .await
            .unwrap();
        assert_eq!(hits.len(), 2);
        assert_eq!(hits[0].date, NaiveDate::from_ymd_opt(2024, 1, 5));
        assert_eq!(hits[1].date, None);
    }

    #[tokio::test]
    async fn http_error_is_transport() {
        let base = serve(Router::new()).await;
        let backend = OpenAiCompatible::new(base, "k");
        let err = backend.complete("m", &ModelRequest::new("r", "p")).await.unwrap_err();
        assert!(matches!(err, GatewayError::Transport(_)));
    }
}
