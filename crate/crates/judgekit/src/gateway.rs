//! Client for chat-completion and embedding endpoints behind an
//! OpenAI-compatible wire protocol, with a content-addressed response
//! cache, bounded retries, and local rating extraction.
//!
//! A `mock://` base URL selects a deterministic offline backend that
//! produces OpenAI-shaped response bodies from a content hash, so the
//! full pipeline (and its cache and parsing paths) runs without network
//! access. Replace the base URL with a real endpoint to go online;
//! nothing else changes.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::EmbeddingVector;
use crate::error::{Error, Result};

const BACKOFF_START: Duration = Duration::from_millis(100);
const BACKOFF_CAP: Duration = Duration::from_secs(5);

/// Embedding width served by the mock backend.
pub const MOCK_EMBED_DIM: usize = 32;

/// Connection settings for one endpoint.
///
/// The API key never lives in the config file; `api_key_env` names the
/// environment variable to read it from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    pub model_name: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_parallelism")]
    pub request_parallelism: usize,
}

fn default_timeout_secs() -> u64 {
    60
}
fn default_max_retries() -> u32 {
    2
}
fn default_max_tokens() -> u32 {
    1024
}
fn default_parallelism() -> usize {
    4
}

impl EndpointConfig {
    /// Offline config pointing at the deterministic mock backend.
    pub fn mock(model_name: &str, temperature: f64) -> Self {
        EndpointConfig {
            base_url: format!("mock://{model_name}"),
            api_key_env: None,
            model_name: model_name.to_string(),
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            temperature,
            max_tokens: default_max_tokens(),
            request_parallelism: default_parallelism(),
        }
    }

    pub fn validate(&self, label: &str) -> Result<()> {
        if self.base_url.is_empty() {
            return Err(Error::Config(format!("{label}.base_url must be non-empty")));
        }
        if self.model_name.is_empty() {
            return Err(Error::Config(format!(
                "{label}.model_name must be non-empty"
            )));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::Config(format!(
                "{label}.temperature = {} must be a finite value >= 0",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(Error::Config(format!("{label}.max_tokens must be > 0")));
        }
        if self.request_parallelism == 0 {
            return Err(Error::Config(format!(
                "{label}.request_parallelism must be >= 1"
            )));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }

    pub fn is_mock(&self) -> bool {
        self.base_url.starts_with("mock://")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Whether token logprobs are requested and how strictly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogprobMode {
    /// Do not request logprobs.
    Omit,
    /// Request them; return `None` if the backend does not provide them.
    Prefer,
    /// Request them; error if the backend does not provide them.
    Require,
}

/// Content hash identifying one request against one model.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn digest(&self) -> &str {
        &self.0
    }
}

/// Digest of (model name, request body, optional sampling salt).
pub fn cache_key(model_name: &str, body: &str, salt: Option<u64>) -> CacheKey {
    let mut hasher = Sha256::new();
    hasher.update(model_name.as_bytes());
    hasher.update(b"\n");
    hasher.update(body.as_bytes());
    if let Some(s) = salt {
        hasher.update(b"\nsalt:");
        hasher.update(s.to_le_bytes());
    }
    let digest = hasher.finalize();
    CacheKey(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    logprobs: bool,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChoiceMessage,
    #[serde(default)]
    logprobs: Option<LogprobBlock>,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: String,
}

#[derive(Deserialize)]
struct LogprobBlock {
    #[serde(default)]
    content: Vec<TokenLogprob>,
}

#[derive(Deserialize)]
struct TokenLogprob {
    logprob: f64,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    embedding: Vec<f64>,
}

enum RequestKind {
    Chat,
    Embed,
}

impl RequestKind {
    fn path(&self) -> &'static str {
        match self {
            RequestKind::Chat => "/chat/completions",
            RequestKind::Embed => "/embeddings",
        }
    }
}

/// Shareable endpoint client with per-request caching.
pub struct GatewayClient {
    config: EndpointConfig,
    api_key: Option<String>,
    cache_dir: Option<PathBuf>,
    cache_stochastic: bool,
    agent: ureq::Agent,
}

impl GatewayClient {
    pub fn new(config: EndpointConfig, cache_dir: Option<&Path>) -> Result<Self> {
        config.validate("endpoint")?;
        let api_key = match &config.api_key_env {
            Some(var) => std::env::var(var).ok(),
            None => None,
        };
        if let Some(dir) = cache_dir {
            fs::create_dir_all(dir).map_err(|source| Error::Io {
                path: dir.to_path_buf(),
                source,
            })?;
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout()))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(GatewayClient {
            config,
            api_key,
            cache_dir: cache_dir.map(Path::to_path_buf),
            cache_stochastic: true,
            agent,
        })
    }

    /// Disable caching of sampled (temperature > 0) completions.
    pub fn cache_stochastic(mut self, cache: bool) -> Self {
        self.cache_stochastic = cache;
        self
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    /// One chat completion. Returns the completion text and, when
    /// requested and supported, one logprob per generated token.
    pub fn chat_complete(
        &self,
        messages: &[ChatMessage],
        logprobs: LogprobMode,
    ) -> Result<(String, Option<Vec<f64>>)> {
        self.chat_complete_salted(messages, logprobs, None)
    }

    /// Chat completion with a sampling salt. With temperature > 0 the
    /// salt enters the cache key (and the mock hash), so repeated draws
    /// for the same prompt stay distinct and replayable.
    pub fn chat_complete_salted(
        &self,
        messages: &[ChatMessage],
        logprobs: LogprobMode,
        salt: Option<u64>,
    ) -> Result<(String, Option<Vec<f64>>)> {
        if messages.is_empty() {
            return Err(Error::EmptyInput("messages"));
        }
        let request = ChatRequest {
            model: &self.config.model_name,
            messages,
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
            logprobs: !matches!(logprobs, LogprobMode::Omit),
        };
        let body = serde_json::to_string(&request)
            .map_err(|e| Error::InvalidInput(format!("request serialization: {e}")))?;
        let effective_salt = if self.config.temperature > 0.0 {
            salt
        } else {
            None
        };
        let response = self.roundtrip(RequestKind::Chat, &body, effective_salt)?;

        let parsed: ChatResponse = serde_json::from_str(&response)
            .map_err(|e| Error::Network(format!("unparseable chat response: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Error::Network("chat response has no choices".into()))?;
        let lps = choice
            .logprobs
            .map(|b| b.content.into_iter().map(|t| t.logprob).collect::<Vec<_>>())
            .filter(|v| !v.is_empty());
        let lps = match (logprobs, lps) {
            (LogprobMode::Omit, _) => None,
            (LogprobMode::Prefer, v) => v,
            (LogprobMode::Require, Some(v)) => Some(v),
            (LogprobMode::Require, None) => return Err(Error::LogprobsUnsupported),
        };
        Ok((choice.message.content, lps))
    }

    /// Embed one text; cached by content.
    pub fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        if text.is_empty() {
            return Err(Error::EmptyInput("text to embed"));
        }
        let request = EmbedRequest {
            model: &self.config.model_name,
            input: text,
        };
        let body = serde_json::to_string(&request)
            .map_err(|e| Error::InvalidInput(format!("request serialization: {e}")))?;
        let response = self.roundtrip(RequestKind::Embed, &body, None)?;
        let parsed: EmbedResponse = serde_json::from_str(&response)
            .map_err(|e| Error::Network(format!("unparseable embedding response: {e}")))?;
        let datum = parsed
            .data
            .into_iter()
            .next()
            .ok_or_else(|| Error::Network("embedding response has no data".into()))?;
        EmbeddingVector::new(datum.embedding)
    }

    /// Cache-wrapped transport: returns the verbatim response body.
    fn roundtrip(&self, kind: RequestKind, body: &str, salt: Option<u64>) -> Result<String> {
        let key = cache_key(&self.config.model_name, body, salt);
        let cache_enabled =
            self.cache_dir.is_some() && (self.config.temperature == 0.0 || self.cache_stochastic);
        let cache_path = self
            .cache_dir
            .as_ref()
            .map(|dir| dir.join(format!("{}.json", key.digest())));

        if cache_enabled {
            if let Some(path) = &cache_path {
                if let Ok(text) = fs::read_to_string(path) {
                    return Ok(text);
                }
            }
        }

        let response = if self.config.is_mock() {
            self.mock_respond(kind, body, salt)?
        } else {
            self.http_with_retries(kind, body)?
        };

        if cache_enabled {
            if let Some(path) = &cache_path {
                write_atomic(path, &response)?;
            }
        }
        Ok(response)
    }

    fn http_with_retries(&self, kind: RequestKind, body: &str) -> Result<String> {
        let url = format!(
            "{}{}",
            self.config.base_url.trim_end_matches('/'),
            kind.path()
        );
        let mut delay = BACKOFF_START;
        let mut attempt = 0;
        loop {
            match self.post_once(&url, body) {
                Ok(text) => return Ok(text),
                Err(e) if attempt < self.config.max_retries && e.is_retryable() => {
                    std::thread::sleep(delay);
                    delay = (delay * 2).min(BACKOFF_CAP);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn post_once(&self, url: &str, body: &str) -> Result<String> {
        let mut request = self
            .agent
            .post(url)
            .header("content-type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.header("authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send(body)
            .map_err(|e| Error::Network(e.to_string()))?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(Error::Http { status });
        }
        response
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Network(e.to_string()))
    }

    /// Deterministic offline backend keyed by the request content hash.
    fn mock_respond(&self, kind: RequestKind, body: &str, salt: Option<u64>) -> Result<String> {
        if body.contains("MOCK_FAIL") {
            return Err(Error::Http { status: 500 });
        }
        let key = cache_key(&self.config.model_name, body, salt);
        let mut seed = [0u8; 32];
        for (i, chunk) in key.digest().as_bytes().chunks(2).take(32).enumerate() {
            seed[i] = u8::from_str_radix(std::str::from_utf8(chunk).unwrap(), 16).unwrap_or(0);
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        let tag = &key.digest()[..8];

        match kind {
            RequestKind::Chat => {
                let request: serde_json::Value = serde_json::from_str(body)
                    .map_err(|e| Error::InvalidInput(format!("mock request: {e}")))?;
                let last_content = request["messages"]
                    .as_array()
                    .and_then(|m| m.last())
                    .and_then(|m| m["content"].as_str())
                    .unwrap_or("");
                let want_logprobs = request["logprobs"].as_bool().unwrap_or(false);

                // Model names containing "norating" simulate an evaluator
                // that never follows the rating format.
                let content = if self.config.model_name.contains("norating") {
                    format!("Reply {tag}: no verdict, just prose.")
                } else if last_content.contains("{\"rating\"") {
                    let rating = rng.random_range(1..=10);
                    format!(
                        "The assistant's answer is broadly consistent with the reference, \
                         with minor omissions. {{\"rating\": {rating}}}"
                    )
                } else if last_content.contains("[Feedback]") {
                    format!("Revised answer {tag}: a fuller treatment of the question that incorporates the feedback.")
                } else if last_content.contains("feedback") {
                    format!("Feedback {tag}: the answer should address the question more directly and add one concrete example.")
                } else {
                    format!("Sample answer {tag}: a plausible response to the request.")
                };

                let logprobs = if want_logprobs {
                    let n = rng.random_range(5..=15);
                    let tokens: Vec<serde_json::Value> = (0..n)
                        .map(|i| {
                            serde_json::json!({
                                "token": format!("t{i}"),
                                "logprob": -rng.random_range(0.0..2.5),
                            })
                        })
                        .collect();
                    serde_json::json!({ "content": tokens })
                } else {
                    serde_json::Value::Null
                };

                Ok(serde_json::json!({
                    "object": "chat.completion",
                    "model": self.config.model_name,
                    "choices": [{
                        "index": 0,
                        "message": { "role": "assistant", "content": content },
                        "logprobs": logprobs,
                        "finish_reason": "stop",
                    }],
                })
                .to_string())
            }
            RequestKind::Embed => {
                let mut values: Vec<f64> = (0..MOCK_EMBED_DIM)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect();
                let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
                for v in &mut values {
                    *v /= norm;
                }
                Ok(serde_json::json!({
                    "object": "list",
                    "model": self.config.model_name,
                    "data": [{ "object": "embedding", "index": 0, "embedding": values }],
                })
                .to_string())
            }
        }
    }
}

/// Write-then-rename with a per-writer temp name, so concurrent writers
/// of the same key never see each other's partial writes; the atomic
/// rename makes the last complete write win.
fn write_atomic(path: &Path, content: &str) -> Result<()> {
    static WRITER: AtomicUsize = AtomicUsize::new(0);
    let tag = WRITER.fetch_add(1, Ordering::Relaxed);
    let tmp = path.with_extension(format!("tmp.{}.{tag}", std::process::id()));
    fs::write(&tmp, content).map_err(|source| Error::Io {
        path: tmp.clone(),
        source,
    })?;
    fs::rename(&tmp, path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Pull the last rating in the declared `{"rating": N}` format out of a
/// completion, falling back to the last standalone `rating ... N` with N
/// in 1..=10.
pub fn extract_rating(text: &str) -> Result<u8> {
    // Both patterns are infallible literals; compile once.
    static PATTERNS: std::sync::OnceLock<(Regex, Regex)> = std::sync::OnceLock::new();
    let (format_re, loose_re) = PATTERNS.get_or_init(|| {
        (
            Regex::new(r#"\{\s*"rating"\s*:\s*(-?\d{1,6})\s*\}"#).unwrap(),
            Regex::new(r"(?i)rating\D{0,40}?(-?\d{1,6})").unwrap(),
        )
    });

    if let Some(caps) = format_re.captures_iter(text).last() {
        let value: i64 = caps[1].parse().unwrap();
        return if (1..=10).contains(&value) {
            Ok(value as u8)
        } else {
            Err(Error::RatingOutOfRange { value })
        };
    }
    let last_in_range = loose_re
        .captures_iter(text)
        .filter_map(|caps| caps[1].parse::<i64>().ok())
        .filter(|v| (1..=10).contains(v))
        .last();
    match last_in_range {
        Some(v) => Ok(v as u8),
        None => Err(Error::NoRating),
    }
}

/// Run a job per item with bounded fan-out, restoring input order.
pub fn parallel_map<T, R, F>(items: &[T], parallelism: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let workers = parallelism.clamp(1, items.len().max(1));
    if workers <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = (0..items.len()).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let out = f(i, &items[i]);
                *slots[i].lock().unwrap() = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .unwrap()
                .expect("worker filled every slot")
        })
        .collect()
}
