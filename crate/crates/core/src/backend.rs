//! Chat and embedding backends: an HTTP JSON client with retry/backoff and
//! bounded concurrency, plus deterministic mocks for tests and offline runs.
//!
//! The wire shape is the common chat-completion JSON dialect (`model`,
//! `messages`, `temperature` → `choices[0].message.content`), so any hosted
//! or local server speaking that dialect can act as planner or judge. API
//! keys are read from the `CEAEVAL_API_KEY` environment variable only —
//! never from config files.

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Environment variable holding the bearer token for HTTP backends.
pub const API_KEY_ENV: &str = "CEAEVAL_API_KEY";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid backend config: {0}")]
    BadConfig(String),
    #[error("chat request must contain at least one message")]
    EmptyRequest,
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("http status {status}")]
    HttpError { status: u16 },
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32, log: Vec<String> },
    #[error("malformed response: {reason}")]
    MalformedResponse { reason: String },
    #[error("transport failure: {reason}")]
    Transport { reason: String },
    #[error("injected fault on call {call}")]
    InjectedFault { call: u64 },
    #[error("no scripted response for request key {key}")]
    NoScriptedResponse { key: String },
    #[error("no embedding available for text {text:?}")]
    NoEmbedding { text: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: "system".to_string(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: "user".to_string(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        ChatRequest { messages, temperature: 0.0 }
    }

    fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::EmptyRequest);
        }
        Ok(())
    }

    /// All message contents joined — what mock synthesis inspects.
    fn flat_text(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub finish_reason: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Stable content hash of a request, used to key scripted mock responses and
/// persisted intermediates. Sixteen hex characters of SHA-256 over the
/// role/content pairs and the temperature.
pub fn request_key(req: &ChatRequest) -> String {
    let mut hasher = Sha256::new();
    for m in &req.messages {
        hasher.update(m.role.as_bytes());
        hasher.update([0x1f]);
        hasher.update(m.content.as_bytes());
        hasher.update([0x1e]);
    }
    hasher.update(format!("{:.3}", req.temperature).as_bytes());
    hex::encode(hasher.finalize())[..16].to_string()
}

/// A synchronous chat-completion backend. Implementations must be safe to
/// share across worker threads; calls may run concurrently up to
/// [`ChatBackend::max_parallel`].
pub trait ChatBackend: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError>;

    /// Upper bound on concurrent in-flight requests the backend tolerates.
    fn max_parallel(&self) -> usize {
        4
    }
}

/// Text-embedding backend used by the agreement metrics.
pub trait EmbeddingBackend: Send + Sync {
    /// Embed a batch of texts; the result has one vector per input, in order.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError>;
}

fn default_base_url() -> String {
    "http://127.0.0.1:8000/v1".to_string()
}
fn default_model_id() -> String {
    "local-model".to_string()
}
fn default_max_parallel() -> usize {
    4
}
fn default_timeout_s() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    250
}

/// Connection settings for HTTP backends. Deliberately has no API-key field:
/// secrets come from [`API_KEY_ENV`] so config files stay shareable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    #[serde(default = "default_base_url")]
    pub base_url: String,
    #[serde(default = "default_model_id")]
    pub model_id: String,
    #[serde(default = "default_max_parallel")]
    pub max_parallel: usize,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: f64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            base_url: default_base_url(),
            model_id: default_model_id(),
            max_parallel: default_max_parallel(),
            timeout_s: default_timeout_s(),
            retries: default_retries(),
            temperature: 0.0,
            backoff_ms: default_backoff_ms(),
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.base_url.trim().is_empty() {
            return Err(BackendError::BadConfig("base_url must not be empty".to_string()));
        }
        if self.max_parallel == 0 {
            return Err(BackendError::BadConfig("max_parallel must be >= 1".to_string()));
        }
        if !(self.timeout_s.is_finite() && self.timeout_s > 0.0) {
            return Err(BackendError::BadConfig(format!(
                "timeout_s must be positive, got {}",
                self.timeout_s
            )));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(BackendError::BadConfig(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Counting semaphore used to honor `max_parallel` as a hard contract even
/// when callers spawn more worker threads than the backend allows.
#[derive(Debug)]
struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore { permits: Mutex::new(permits), cv: Condvar::new() }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.cv.wait(permits).unwrap();
        }
        *permits -= 1;
        SemaphoreGuard { sem: self }
    }
}

struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.sem.permits.lock().unwrap() += 1;
        self.sem.cv.notify_one();
    }
}

fn backoff_delay(base_ms: u64, attempt: u32) -> Duration {
    let ms = base_ms.saturating_mul(1u64 << attempt.min(16)).min(10_000);
    Duration::from_millis(ms)
}

fn retryable_status(status: u16) -> bool {
    status == 429 || (500..=599).contains(&status)
}

/// Blocking HTTP chat client. Retries 429/5xx/transport failures with
/// exponential backoff; concurrent calls are bounded by a semaphore sized to
/// `max_parallel`.
pub struct HttpBackend {
    cfg: BackendConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    sem: Semaphore,
}

impl HttpBackend {
    pub fn new(cfg: BackendConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_s))
            .build()
            .map_err(|e| BackendError::Transport { reason: e.to_string() })?;
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        let sem = Semaphore::new(cfg.max_parallel);
        Ok(HttpBackend { cfg, client, api_key, sem })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    fn post_json(
        &self,
        url: &str,
        body: &serde_json::Value,
    ) -> Result<serde_json::Value, BackendError> {
        let mut log = Vec::new();
        let attempts = self.cfg.retries + 1;
        let mut last_status: Option<u16> = None;
        let mut last_timeout = false;

        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(backoff_delay(self.cfg.backoff_ms, attempt - 1));
            }
            let mut builder = self.client.post(url).json(body);
            if let Some(key) = &self.api_key {
                builder = builder.header("authorization", format!("Bearer {key}"));
            }
            match builder.send() {
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    if resp.status().is_success() {
                        return resp.json().map_err(|e| BackendError::MalformedResponse {
                            reason: format!("response body is not JSON: {e}"),
                        });
                    }
                    log.push(format!("attempt {}: HTTP {status}", attempt + 1));
                    last_status = Some(status);
                    last_timeout = false;
                    if !retryable_status(status) {
                        return Err(BackendError::HttpError { status });
                    }
                }
                Err(e) => {
                    log.push(format!("attempt {}: {e}", attempt + 1));
                    last_status = None;
                    last_timeout = e.is_timeout();
                }
            }
        }

        match last_status {
            Some(429) => Err(BackendError::RateLimited { attempts, log }),
            Some(status) => Err(BackendError::HttpError { status }),
            None if last_timeout => Err(BackendError::Timeout { attempts }),
            None => Err(BackendError::Transport { reason: log.join("; ") }),
        }
    }
}

impl ChatBackend for HttpBackend {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        req.validate()?;
        let _permit = self.sem.acquire();
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let body = serde_json::json!({
            "model": self.cfg.model_id,
            "messages": req.messages,
            "temperature": req.temperature,
        });
        let value = self.post_json(&url, &body)?;

        let choice = value
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| BackendError::MalformedResponse {
                reason: "missing choices[0]".to_string(),
            })?;
        let text = choice
            .pointer("/message/content")
            .and_then(|v| v.as_str())
            .ok_or_else(|| BackendError::MalformedResponse {
                reason: "missing choices[0].message.content".to_string(),
            })?
            .to_string();
        let finish_reason = choice
            .get("finish_reason")
            .and_then(|v| v.as_str())
            .unwrap_or("stop")
            .to_string();
        if text.is_empty() && finish_reason == "stop" {
            return Err(BackendError::MalformedResponse {
                reason: "empty text with normal finish reason".to_string(),
            });
        }
        let usage = |field: &str| {
            value.pointer(&format!("/usage/{field}")).and_then(|v| v.as_u64()).unwrap_or(0)
        };
        Ok(ChatResponse {
            text,
            finish_reason,
            prompt_tokens: usage("prompt_tokens"),
            completion_tokens: usage("completion_tokens"),
        })
    }

    fn max_parallel(&self) -> usize {
        self.cfg.max_parallel
    }
}

const MOCK_EMOTIONS: [&str; 8] =
    ["gentle", "joyful", "anxious", "calm", "stern", "excited", "weary", "tender"];
const MOCK_RHYTHMS: [&str; 7] =
    ["brisk", "heavy", "low-paced", "high-energy", "relaxed", "tense", "soothing"];
const MOCK_INTONATIONS: [&str; 5] = ["flat", "rising", "curved", "falling", "rising intonation"];
const MOCK_CONDITIONS: [&str; 4] =
    ["normal speech", "whispering", "shouting", "emotional speech"];

/// Deterministic in-process backend.
///
/// Resolution order per request: scripted response by [`request_key`] →
/// content-aware synthesis (when enabled) → default response → error.
/// Synthesis recognizes the bundled prompt families and emits structurally
/// valid plans and verdicts derived from a seeded hash of the request, so a
/// full pipeline run works offline and reproduces bit-exactly.
pub struct MockBackend {
    script: HashMap<String, String>,
    default_response: Option<String>,
    synthesize: bool,
    seed: u64,
    max_parallel: usize,
    delay: Option<Duration>,
    fail_on_calls: BTreeSet<u64>,
    calls: AtomicU64,
    in_flight: AtomicU64,
    peak_in_flight: AtomicU64,
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl MockBackend {
    pub fn new() -> Self {
        MockBackend {
            script: HashMap::new(),
            default_response: None,
            synthesize: false,
            seed: 0,
            max_parallel: 4,
            delay: None,
            fail_on_calls: BTreeSet::new(),
            calls: AtomicU64::new(0),
            in_flight: AtomicU64::new(0),
            peak_in_flight: AtomicU64::new(0),
        }
    }

    /// Backend that synthesizes plausible responses from a seed.
    pub fn synthesizing(seed: u64) -> Self {
        let mut b = Self::new();
        b.synthesize = true;
        b.seed = seed;
        b
    }

    pub fn with_script(mut self, script: HashMap<String, String>) -> Self {
        self.script = script;
        self
    }

    /// Script one request: `key` as produced by [`request_key`].
    pub fn script_entry(mut self, key: impl Into<String>, response: impl Into<String>) -> Self {
        self.script.insert(key.into(), response.into());
        self
    }

    pub fn with_default(mut self, response: impl Into<String>) -> Self {
        self.default_response = Some(response.into());
        self
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = Some(delay);
        self
    }

    pub fn with_max_parallel(mut self, max_parallel: usize) -> Self {
        self.max_parallel = max_parallel.max(1);
        self
    }

    /// Make the `n`-th call (1-based, across all threads) fail.
    pub fn fail_on_call(mut self, n: u64) -> Self {
        self.fail_on_calls.insert(n);
        self
    }

    pub fn fail_on_calls(mut self, ns: impl IntoIterator<Item = u64>) -> Self {
        self.fail_on_calls.extend(ns);
        self
    }

    /// Total calls served (including injected failures).
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    /// Highest number of simultaneously in-flight calls observed.
    pub fn peak_in_flight(&self) -> u64 {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    fn synthesize_response(&self, req: &ChatRequest) -> String {
        let prompt = req.flat_text();
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(request_key(req).as_bytes());
        let h = hasher.finalize();

        if prompt.contains("[Output Requirements]") {
            let emotion = MOCK_EMOTIONS[h[0] as usize % MOCK_EMOTIONS.len()];
            let rhythm = MOCK_RHYTHMS[h[1] as usize % MOCK_RHYTHMS.len()];
            let intonation = MOCK_INTONATIONS[h[2] as usize % MOCK_INTONATIONS.len()];
            let condition = MOCK_CONDITIONS[h[3] as usize % MOCK_CONDITIONS.len()];
            let cond_key =
                if h[5] % 2 == 0 { "recording condition" } else { "recording_condition" };
            let body = format!(
                "{{\n  \"emotion\": \"{emotion}\",\n  \"rhythm\": \"{rhythm}\",\n  \"intonation\": \"{intonation}\",\n  \"{cond_key}\": \"{condition}\"\n}}"
            );
            return if h[4] % 4 == 0 {
                format!("The ideal performance in this context is:\n{body}")
            } else {
                body
            };
        }

        let judge = prompt.contains("# Ideal Expressive Plan:") || prompt.contains("# 理想表现力计划：");
        let baseline = prompt.contains("# Output Format:") || prompt.contains("# 输出格式：");
        if judge || baseline {
            let score = f64::from(h[6] % 51) / 10.0;
            if judge {
                let with_cot =
                    prompt.contains("Think step by step") || prompt.contains("请逐步思考");
                if with_cot {
                    let dim = |i: usize| -> f64 {
                        let raw = (score * 10.0) as i64 + i64::from(h[7 + i] % 5) - 2;
                        raw.clamp(0, 50) as f64 / 10.0
                    };
                    return format!(
                        "The delivery largely follows the ideal plan for this moment. \
                         Emotion score of {:.1}. Rhythm score of {:.1}. Intonation score of {:.1}. \
                         Recording condition score of {:.1}. Overall the utterance fits its context.\n<s>{score:.1}</s>",
                        dim(0),
                        dim(1),
                        dim(2),
                        dim(3)
                    );
                }
                return format!("<s>{score:.1}</s>");
            }
            let with_cot = prompt.contains("explicit reasoning process")
                || prompt.contains("明确的推理过程");
            if with_cot {
                return format!(
                    "The utterance broadly matches the expected delivery at this point in the story.\n<score>{score:.1}</score>"
                );
            }
            return format!("<score>{score:.1}</score>");
        }

        "Understood.".to_string()
    }
}

/// Decrements the in-flight gauge even on early error returns.
struct FlightGuard<'a>(&'a AtomicU64);

impl Drop for FlightGuard<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

impl ChatBackend for MockBackend {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        req.validate()?;
        let call_no = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        let _guard = FlightGuard(&self.in_flight);
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);

        if let Some(delay) = self.delay {
            std::thread::sleep(delay);
        }
        if self.fail_on_calls.contains(&call_no) {
            return Err(BackendError::InjectedFault { call: call_no });
        }

        let key = request_key(req);
        let text = if let Some(scripted) = self.script.get(&key) {
            scripted.clone()
        } else if self.synthesize {
            self.synthesize_response(req)
        } else if let Some(default) = &self.default_response {
            default.clone()
        } else {
            return Err(BackendError::NoScriptedResponse { key });
        };

        let prompt_chars: usize = req.messages.iter().map(|m| m.content.chars().count()).sum();
        Ok(ChatResponse {
            prompt_tokens: (prompt_chars / 4) as u64,
            completion_tokens: (text.chars().count() / 4) as u64,
            text,
            finish_reason: "stop".to_string(),
        })
    }

    fn max_parallel(&self) -> usize {
        self.max_parallel
    }
}

/// Enforces a caller-side concurrency bound around any backend.
pub struct Throttled<B> {
    inner: B,
    sem: Semaphore,
    limit: usize,
}

impl<B> Throttled<B> {
    pub fn new(inner: B, limit: usize) -> Self {
        let limit = limit.max(1);
        Throttled { inner, sem: Semaphore::new(limit), limit }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn into_inner(self) -> B {
        self.inner
    }
}

impl<B: ChatBackend> ChatBackend for Throttled<B> {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let _permit = self.sem.acquire();
        self.inner.chat(req)
    }

    fn max_parallel(&self) -> usize {
        self.limit
    }
}

/// Deterministic embedding mock: each text hashes to a seed that drives a
/// fixed gaussian draw, then the vector is normalized. Identical texts embed
/// identically; distinct texts land nearly orthogonal in high dimensions.
#[derive(Debug, Clone)]
pub struct HashEmbedding {
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashEmbedding {
    fn default() -> Self {
        HashEmbedding { dim: 16, seed: 0 }
    }
}

impl HashEmbedding {
    pub fn new(dim: usize, seed: u64) -> Self {
        HashEmbedding { dim: dim.max(1), seed }
    }
}

impl EmbeddingBackend for HashEmbedding {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};

        Ok(texts
            .iter()
            .map(|text| {
                let mut hasher = Sha256::new();
                hasher.update(self.seed.to_le_bytes());
                hasher.update(text.as_bytes());
                let digest = hasher.finalize();
                let seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let mut v: Vec<f64> =
                    (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for x in &mut v {
                        *x /= norm;
                    }
                } else {
                    v[0] = 1.0;
                }
                v
            })
            .collect())
    }
}

/// Embedding mock with explicit per-text vectors, for constructing exact
/// geometric situations (orthogonal raters, identical raters, …).
#[derive(Debug, Clone, Default)]
pub struct TableEmbedding {
    table: HashMap<String, Vec<f64>>,
}

impl TableEmbedding {
    pub fn new(entries: impl IntoIterator<Item = (String, Vec<f64>)>) -> Self {
        TableEmbedding { table: entries.into_iter().collect() }
    }

    pub fn insert(&mut self, text: impl Into<String>, vector: Vec<f64>) {
        self.table.insert(text.into(), vector);
    }
}

impl EmbeddingBackend for TableEmbedding {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        texts
            .iter()
            .map(|t| {
                self.table
                    .get(t)
                    .cloned()
                    .ok_or_else(|| BackendError::NoEmbedding { text: t.clone() })
            })
            .collect()
    }
}

/// HTTP embedding client sharing the chat client's retry and auth behavior.
/// Wire shape: POST `{base_url}/embeddings` with `{"model", "input"}`,
/// response `{"data": [{"embedding": [...]}, ...]}` in input order.
pub struct HttpEmbeddingBackend {
    http: HttpBackend,
}

impl HttpEmbeddingBackend {
    pub fn new(cfg: BackendConfig) -> Result<Self, BackendError> {
        Ok(HttpEmbeddingBackend { http: HttpBackend::new(cfg)? })
    }
}

impl EmbeddingBackend for HttpEmbeddingBackend {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        let _permit = self.http.sem.acquire();
        let url = format!("{}/embeddings", self.http.cfg.base_url.trim_end_matches('/'));
        let body = serde_json::json!({
            "model": self.http.cfg.model_id,
            "input": texts,
        });
        let value = self.http.post_json(&url, &body)?;
        let data = value
            .get("data")
            .and_then(|d| d.as_array())
            .ok_or_else(|| BackendError::MalformedResponse {
                reason: "missing data array".to_string(),
            })?;
        if data.len() != texts.len() {
            return Err(BackendError::MalformedResponse {
                reason: format!("expected {} embeddings, got {}", texts.len(), data.len()),
            });
        }
        data.iter()
            .map(|item| {
                item.get("embedding")
                    .and_then(|e| e.as_array())
                    .map(|arr| arr.iter().filter_map(|v| v.as_f64()).collect::<Vec<f64>>())
                    .filter(|v| !v.is_empty())
                    .ok_or_else(|| BackendError::MalformedResponse {
                        reason: "missing embedding vector".to_string(),
                    })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::sync::Arc;

    fn req(system: &str, user: &str) -> ChatRequest {
        ChatRequest::new(vec![ChatMessage::system(system), ChatMessage::user(user)])
    }

    #[test]
    fn request_key_is_stable_and_content_sensitive() {
        let a = req("sys", "hello");
        assert_eq!(request_key(&a), request_key(&a.clone()));
        assert_eq!(request_key(&a).len(), 16);
        assert_ne!(request_key(&a), request_key(&req("sys", "hello!")));
        assert_ne!(request_key(&a), request_key(&req("sys2", "hello")));
        let mut warm = a.clone();
        warm.temperature = 0.7;
        assert_ne!(request_key(&a), request_key(&warm));
    }

    #[test]
    fn role_content_boundaries_do_not_collide() {
        // ("ab", "c") vs ("a", "bc") must hash differently.
        let a = ChatRequest::new(vec![ChatMessage { role: "ab".into(), content: "c".into() }]);
        let b = ChatRequest::new(vec![ChatMessage { role: "a".into(), content: "bc".into() }]);
        assert_ne!(request_key(&a), request_key(&b));
    }

    #[test]
    fn mock_serves_script_then_default() {
        let r = req("s", "u");
        let backend = MockBackend::new()
            .script_entry(request_key(&r), "scripted")
            .with_default("fallback");
        assert_eq!(backend.chat(&r).unwrap().text, "scripted");
        assert_eq!(backend.chat(&req("s", "other")).unwrap().text, "fallback");

        let bare = MockBackend::new();
        assert!(matches!(
            bare.chat(&r),
            Err(BackendError::NoScriptedResponse { .. })
        ));
    }

    #[test]
    fn empty_request_is_rejected() {
        let backend = MockBackend::new().with_default("x");
        let empty = ChatRequest::new(vec![]);
        assert!(matches!(backend.chat(&empty), Err(BackendError::EmptyRequest)));
    }

    #[test]
    fn fault_injection_hits_exactly_the_named_call() {
        let backend = MockBackend::new().with_default("ok").fail_on_call(3);
        let r = req("s", "u");
        assert!(backend.chat(&r).is_ok());
        assert!(backend.chat(&r).is_ok());
        match backend.chat(&r) {
            Err(BackendError::InjectedFault { call: 3 }) => {}
            other => panic!("expected injected fault, got {other:?}"),
        }
        assert!(backend.chat(&r).is_ok());
        assert_eq!(backend.calls(), 4);
    }

    #[test]
    fn synthesized_plan_parses() {
        let backend = MockBackend::synthesizing(7);
        for i in 0..20 {
            let r = req(
                "plan the delivery\n[Output Requirements]\nRespond with JSON.",
                &format!("Target utterance: line {i}"),
            );
            let resp = backend.chat(&r).unwrap();
            let plan = crate::planner::parse_plan(&resp.text)
                .unwrap_or_else(|e| panic!("unparseable synthesized plan {:?}: {e}", resp.text));
            assert!(!plan.emotion.is_empty());
        }
    }

    #[test]
    fn synthesized_judge_verdict_parses_and_tracks_mode() {
        let backend = MockBackend::synthesizing(11);
        let cot = req(
            "# Ideal Expressive Plan:\nemotion: calm\nThink step by step and explain your analysis before giving the final score.",
            "[audio: a.wav]",
        );
        let resp = backend.chat(&cot).unwrap();
        let verdict = crate::judge::parse_verdict(&resp.text).unwrap();
        assert!((0.0..=5.0).contains(&verdict.final_score));
        assert!(verdict.cot_text.is_some());
        assert_eq!(verdict.dimension_scores.len(), 4);

        let plain = req(
            "# Ideal Expressive Plan:\nemotion: calm\nGive the final expressive appropriateness score only.",
            "[audio: a.wav]",
        );
        let v2 = crate::judge::parse_verdict(&backend.chat(&plain).unwrap().text).unwrap();
        assert!(v2.cot_text.is_none());
        assert!(v2.dimension_scores.is_empty());
    }

    #[test]
    fn synthesis_is_deterministic_per_seed() {
        let r = req("# Output Format:\nwrap in score tags", "line");
        let a = MockBackend::synthesizing(3).chat(&r).unwrap().text;
        let b = MockBackend::synthesizing(3).chat(&r).unwrap().text;
        assert_eq!(a, b);
        let c = MockBackend::synthesizing(4).chat(&r).unwrap().text;
        // Different seed → different hash; scores collide only 1 in 51.
        let _ = c;
        assert!(c.starts_with("<score>"));
    }

    #[test]
    fn throttled_mock_never_exceeds_limit() {
        let limit = 3;
        let backend = Arc::new(Throttled::new(
            MockBackend::new()
                .with_default("ok")
                .with_delay(Duration::from_millis(15))
                .with_max_parallel(limit),
            limit,
        ));
        let mut handles = Vec::new();
        for t in 0..12 {
            let b = Arc::clone(&backend);
            handles.push(std::thread::spawn(move || {
                for i in 0..2 {
                    b.chat(&req("s", &format!("{t}-{i}"))).unwrap();
                }
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        let peak = backend.inner().peak_in_flight();
        assert!(peak as usize <= limit, "peak {peak} exceeded limit {limit}");
        assert!(peak >= 2, "workers never overlapped; peak {peak}");
        assert_eq!(backend.inner().calls(), 24);
    }

    /// Minimal HTTP/1.1 responder: answers `responses[i]` to the i-th request,
    /// closing the connection each time, and records how many requests landed.
    fn spawn_scripted_server(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<usize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let mut served = 0;
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = Vec::new();
                let mut chunk = [0u8; 1024];
                // Read headers, then the content-length body.
                let body_len = loop {
                    let n = stream.read(&mut chunk).unwrap();
                    if n == 0 {
                        break 0;
                    }
                    buf.extend_from_slice(&chunk[..n]);
                    if let Some(pos) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
                        let headers = String::from_utf8_lossy(&buf[..pos]).to_lowercase();
                        let want: usize = headers
                            .lines()
                            .find_map(|l| l.strip_prefix("content-length:"))
                            .and_then(|v| v.trim().parse().ok())
                            .unwrap_or(0);
                        let have = buf.len() - pos - 4;
                        break want.saturating_sub(have);
                    }
                };
                let mut rest = vec![0u8; body_len];
                if body_len > 0 {
                    stream.read_exact(&mut rest).unwrap();
                }
                let reason = if status == 200 { "OK" } else { "Too Many Requests" };
                let reply = format!(
                    "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
                served += 1;
            }
            served
        });
        (format!("http://{addr}/v1"), handle)
    }

    fn chat_ok_body(text: &str) -> String {
        serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
            "usage": {"prompt_tokens": 5, "completion_tokens": 2},
        })
        .to_string()
    }

    #[test]
    fn http_backend_retries_429_then_succeeds() {
        let (base_url, server) = spawn_scripted_server(vec![
            (429, "{}".to_string()),
            (200, chat_ok_body("hello from retry")),
        ]);
        let backend = HttpBackend::new(BackendConfig {
            base_url,
            retries: 3,
            backoff_ms: 1,
            timeout_s: 5.0,
            ..BackendConfig::default()
        })
        .unwrap();
        let resp = backend.chat(&req("s", "u")).unwrap();
        assert_eq!(resp.text, "hello from retry");
        assert_eq!(resp.prompt_tokens, 5);
        assert_eq!(server.join().unwrap(), 2, "exactly one retry");
    }

    #[test]
    fn http_backend_surfaces_rate_limit_after_exhaustion() {
        let (base_url, server) =
            spawn_scripted_server(vec![(429, "{}".to_string()), (429, "{}".to_string())]);
        let backend = HttpBackend::new(BackendConfig {
            base_url,
            retries: 1,
            backoff_ms: 1,
            timeout_s: 5.0,
            ..BackendConfig::default()
        })
        .unwrap();
        match backend.chat(&req("s", "u")) {
            Err(BackendError::RateLimited { attempts: 2, log }) => {
                assert_eq!(log.len(), 2);
                assert!(log[0].contains("429"));
            }
            other => panic!("expected RateLimited, got {other:?}"),
        }
        assert_eq!(server.join().unwrap(), 2);
    }

    #[test]
    fn http_backend_rejects_client_errors_without_retry() {
        let (base_url, server) = spawn_scripted_server(vec![(400, "{}".to_string())]);
        let backend = HttpBackend::new(BackendConfig {
            base_url,
            retries: 3,
            backoff_ms: 1,
            timeout_s: 5.0,
            ..BackendConfig::default()
        })
        .unwrap();
        match backend.chat(&req("s", "u")) {
            Err(BackendError::HttpError { status: 400 }) => {}
            other => panic!("expected HttpError(400), got {other:?}"),
        }
        assert_eq!(server.join().unwrap(), 1, "client errors are not retried");
    }

    #[test]
    fn http_embedding_backend_parses_vectors() {
        let body = serde_json::json!({
            "data": [
                {"embedding": [1.0, 0.0]},
                {"embedding": [0.0, 1.0]},
            ],
        })
        .to_string();
        let (base_url, server) = spawn_scripted_server(vec![(200, body)]);
        let backend = HttpEmbeddingBackend::new(BackendConfig {
            base_url,
            timeout_s: 5.0,
            ..BackendConfig::default()
        })
        .unwrap();
        let out = backend.embed(&["a".to_string(), "b".to_string()]).unwrap();
        assert_eq!(out, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(server.join().unwrap(), 1);
    }

    #[test]
    fn config_validation_catches_nonsense() {
        let bad = BackendConfig { max_parallel: 0, ..BackendConfig::default() };
        assert!(matches!(HttpBackend::new(bad), Err(BackendError::BadConfig(_))));
        let bad = BackendConfig { timeout_s: 0.0, ..BackendConfig::default() };
        assert!(bad.validate().is_err());
        let bad = BackendConfig { temperature: -1.0, ..BackendConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn hash_embedding_is_unit_norm_and_deterministic() {
        let e = HashEmbedding::default();
        let out = e
            .embed(&["calm".to_string(), "calm".to_string(), "furious".to_string()])
            .unwrap();
        assert_eq!(out[0], out[1]);
        assert_ne!(out[0], out[2]);
        for v in &out {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn table_embedding_reports_missing_texts() {
        let table = TableEmbedding::new([("a".to_string(), vec![1.0, 0.0])]);
        assert!(table.embed(&["a".to_string()]).is_ok());
        assert!(matches!(
            table.embed(&["b".to_string()]),
            Err(BackendError::NoEmbedding { .. })
        ));
    }
}
