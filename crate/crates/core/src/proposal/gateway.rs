//! Chat-completion gateway.
//!
//! [`ChatGateway`] is the only way the toolkit talks to a model. The HTTP
//! implementation speaks the common chat-completions wire format; the
//! scripted implementations replay canned replies so the whole pipeline can
//! run offline. Layers compose: `Metered<Cached<Retrying<Http>>>`.

use std::collections::{HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const API_KEY_ENV: &str = "GATEWAY_API_KEY";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    /// Distinguishes repeated samples of the same prompt.
    pub sample_index: u32,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>, temperature: f64, sample_index: u32) -> Self {
        Self {
            messages,
            temperature,
            sample_index,
        }
    }

    /// Canonical prompt text used for hashing.
    pub fn prompt_text(&self) -> String {
        let mut s = String::new();
        for m in &self.messages {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            s.push_str(role);
            s.push('\u{1f}');
            s.push_str(&m.content);
            s.push('\u{1e}');
        }
        s
    }

    /// Hex SHA-256 of the prompt text alone.
    pub fn prompt_hash(&self) -> String {
        hex::encode(Sha256::digest(self.prompt_text().as_bytes()))
    }
}

#[derive(Debug, Clone, Error)]
pub enum GatewayError {
    #[error("network error: {0}")]
    Network(String),
    #[error("http status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("cannot decode reply: {0}")]
    Decode(String),
    #[error("no scripted reply for prompt {0}")]
    StubMissing(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("gateway misconfigured: {0}")]
    Config(String),
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Network(_) => true,
            GatewayError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

pub trait ChatGateway: Send + Sync {
    fn model(&self) -> &str;
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError>;
}

impl<G: ChatGateway + ?Sized> ChatGateway for Arc<G> {
    fn model(&self) -> &str {
        (**self).model()
    }
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        (**self).complete(request)
    }
}

impl<G: ChatGateway + ?Sized> ChatGateway for Box<G> {
    fn model(&self) -> &str {
        (**self).model()
    }
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        (**self).complete(request)
    }
}

impl<G: ChatGateway + ?Sized> ChatGateway for &G {
    fn model(&self) -> &str {
        (**self).model()
    }
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        (**self).complete(request)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    /// Full chat-completions URL.
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub timeout_secs: f64,
    pub cache_dir: Option<PathBuf>,
    /// Requests per minute; `None` disables rate limiting.
    pub rate_limit_per_min: Option<u32>,
    pub backoff_base_ms: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://openrouter.ai/api/v1/chat/completions".into(),
            model: "google/gemini-2.0-flash-lite-001".into(),
            temperature: 0.7,
            max_retries: 3,
            timeout_secs: 120.0,
            cache_dir: None,
            rate_limit_per_min: Some(60),
            backoff_base_ms: 500,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::Config(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.timeout_secs <= 0.0 {
            return Err(GatewayError::Config("timeout must be positive".into()));
        }
        Ok(())
    }
}

/// Token bucket refilled continuously at `per_minute / 60` tokens per second.
#[derive(Debug)]
pub struct TokenBucket {
    capacity: f64,
    per_sec: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn per_minute(per_minute: u32) -> Self {
        let capacity = f64::from(per_minute.max(1));
        Self {
            capacity,
            per_sec: capacity / 60.0,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    /// Block until a token is available, then take it.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut st = self.state.lock().unwrap();
                let now = Instant::now();
                let refill = now.duration_since(st.1).as_secs_f64() * self.per_sec;
                st.0 = (st.0 + refill).min(self.capacity);
                st.1 = now;
                if st.0 >= 1.0 {
                    st.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - st.0) / self.per_sec)
            };
            thread::sleep(wait);
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
}

/// Chat-completions client. One attempt per call; wrap in [`Retrying`].
pub struct HttpGateway {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    limiter: Option<TokenBucket>,
}

impl HttpGateway {
    pub fn new(config: &GatewayConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: config.endpoint.clone(),
            model: config.model.clone(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            limiter: config.rate_limit_per_min.map(TokenBucket::per_minute),
        })
    }
}

impl ChatGateway for HttpGateway {
    fn model(&self) -> &str {
        &self.model
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        if let Some(l) = &self.limiter {
            l.acquire();
        }
        let body = WireRequest {
            model: &self.model,
            messages: &request.messages,
            temperature: request.temperature,
        };
        let mut req = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| GatewayError::Network(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(GatewayError::Status {
                status: status.as_u16(),
                body,
            });
        }
        let parsed: WireResponse = resp
            .json()
            .map_err(|e| GatewayError::Decode(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| GatewayError::Decode("reply has no message content".into()))
    }
}

/// Exponential-backoff retry layer.
pub struct Retrying<G> {
    inner: G,
    max_retries: u32,
    base: Duration,
}

impl<G: ChatGateway> Retrying<G> {
    pub fn new(inner: G, max_retries: u32, base: Duration) -> Self {
        Self {
            inner,
            max_retries,
            base,
        }
    }
}

impl<G: ChatGateway> ChatGateway for Retrying<G> {
    fn model(&self) -> &str {
        self.inner.model()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let mut attempt = 0u32;
        loop {
            match self.inner.complete(request) {
                Ok(reply) => return Ok(reply),
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    let delay = self.base.saturating_mul(1u32 << attempt.min(10));
                    log::warn!(
                        "gateway attempt {} failed: {e}; retrying in {delay:?}",
                        attempt + 1
                    );
                    thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) if e.is_retryable() => {
                    return Err(GatewayError::Exhausted {
                        attempts: attempt + 1,
                        last: e.to_string(),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    reply: String,
}

/// Disk cache keyed by `(model, prompt, temperature, sample_index)`.
pub struct Cached<G> {
    inner: G,
    dir: PathBuf,
}

impl<G: ChatGateway> Cached<G> {
    pub fn new(inner: G, dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { inner, dir })
    }

    pub fn key(&self, request: &ChatRequest) -> String {
        cache_key(self.inner.model(), request)
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    fn lookup(&self, key: &str) -> Option<String> {
        let bytes = std::fs::read(self.path_for(key)).ok()?;
        match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(entry) if entry.key == key => Some(entry.reply),
            _ => {
                log::warn!("ignoring corrupt cache entry {key}");
                None
            }
        }
    }

    fn store(&self, key: &str, reply: &str) -> std::io::Result<()> {
        let entry = CacheEntry {
            key: key.to_string(),
            reply: reply.to_string(),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        serde_json::to_writer(&mut tmp, &entry)?;
        tmp.persist(self.path_for(key)).map_err(|e| e.error)?;
        Ok(())
    }
}

pub fn cache_key(model: &str, request: &ChatRequest) -> String {
    let mut h = Sha256::new();
    h.update(model.as_bytes());
    h.update([0u8]);
    h.update(request.prompt_text().as_bytes());
    h.update([0u8]);
    h.update(request.temperature.to_bits().to_le_bytes());
    h.update(request.sample_index.to_le_bytes());
    hex::encode(h.finalize())
}

impl<G: ChatGateway> ChatGateway for Cached<G> {
    fn model(&self) -> &str {
        self.inner.model()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        cached_call(self, request)
    }
}

/// Cache hit returns the stored reply; a miss calls through and stores.
pub fn cached_call<G: ChatGateway>(
    cache: &Cached<G>,
    request: &ChatRequest,
) -> Result<String, GatewayError> {
    let key = cache.key(request);
    if let Some(reply) = cache.lookup(&key) {
        return Ok(reply);
    }
    let reply = cache.inner.complete(request)?;
    if let Err(e) = cache.store(&key, &reply) {
        log::warn!("cache write failed for {key}: {e}");
    }
    Ok(reply)
}

/// Counts calls that reach the wrapped gateway.
pub struct Metered<G> {
    inner: G,
    calls: AtomicU64,
}

impl<G: ChatGateway> Metered<G> {
    pub fn new(inner: G) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &G {
        &self.inner
    }
}

impl<G: ChatGateway> ChatGateway for Metered<G> {
    fn model(&self) -> &str {
        self.inner.model()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request)
    }
}

/// Replays a fixed queue of replies in call order.
pub struct ScriptedGateway {
    replies: Mutex<VecDeque<Result<String, GatewayError>>>,
    seen: Mutex<Vec<ChatRequest>>,
}

impl ScriptedGateway {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::with_results(replies.into_iter().map(|s| Ok(s.into())))
    }

    pub fn with_results(replies: impl IntoIterator<Item = Result<String, GatewayError>>) -> Self {
        Self {
            replies: Mutex::new(replies.into_iter().collect()),
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.lock().unwrap().clone()
    }

    pub fn remaining(&self) -> usize {
        self.replies.lock().unwrap().len()
    }
}

impl ChatGateway for ScriptedGateway {
    fn model(&self) -> &str {
        "scripted"
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        self.seen.lock().unwrap().push(request.clone());
        self.replies
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or_else(|| Err(GatewayError::StubMissing(request.prompt_hash())))
    }
}

/// Answers with a closure over the request.
pub struct FnGateway<F> {
    f: F,
}

impl<F> FnGateway<F>
where
    F: Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync,
{
    pub fn new(f: F) -> Self {
        Self { f }
    }
}

impl<F> ChatGateway for FnGateway<F>
where
    F: Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync,
{
    fn model(&self) -> &str {
        "fn"
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        (self.f)(request)
    }
}

/// One canned reply in a stub directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StubRecord {
    pub prompt_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_index: Option<u32>,
    pub reply: String,
}

impl StubRecord {
    pub fn for_request(request: &ChatRequest, reply: impl Into<String>) -> Self {
        Self {
            prompt_sha256: request.prompt_hash(),
            sample_index: Some(request.sample_index),
            reply: reply.into(),
        }
    }
}

/// Directory of `*.jsonl` files holding [`StubRecord`]s.
///
/// Lookup prefers an exact `(prompt, sample_index)` record and falls back to
/// a record without a sample index.
pub struct StubDirGateway {
    exact: HashMap<(String, u32), String>,
    any: HashMap<String, String>,
}

impl StubDirGateway {
    pub fn load(dir: &Path) -> Result<Self, GatewayError> {
        let mut exact = HashMap::new();
        let mut any = HashMap::new();
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| GatewayError::Config(format!("stub dir {}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        entries.sort();
        for path in entries {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
            for (n, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: StubRecord = serde_json::from_str(line).map_err(|e| {
                    GatewayError::Config(format!("{}:{}: {e}", path.display(), n + 1))
                })?;
                match rec.sample_index {
                    Some(k) => {
                        exact.insert((rec.prompt_sha256, k), rec.reply);
                    }
                    None => {
                        any.insert(rec.prompt_sha256, rec.reply);
                    }
                }
            }
        }
        Ok(Self { exact, any })
    }

    pub fn len(&self) -> usize {
        self.exact.len() + self.any.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ChatGateway for StubDirGateway {
    fn model(&self) -> &str {
        "stub"
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let hash = request.prompt_hash();
        if let Some(r) = self.exact.get(&(hash.clone(), request.sample_index)) {
            return Ok(r.clone());
        }
        self.any
            .get(&hash)
            .cloned()
            .ok_or(GatewayError::StubMissing(hash))
    }
}

/// Build the HTTP stack described by `config`, with a call meter on top.
pub fn build_http_gateway(
    config: &GatewayConfig,
) -> Result<Arc<Metered<Box<dyn ChatGateway>>>, GatewayError> {
    let http = HttpGateway::new(config)?;
    let retrying = Retrying::new(
        http,
        config.max_retries,
        Duration::from_millis(config.backoff_base_ms),
    );
    let stack: Box<dyn ChatGateway> = match &config.cache_dir {
        Some(dir) => Box::new(
            Cached::new(retrying, dir)
                .map_err(|e| GatewayError::Config(format!("cache dir: {e}")))?,
        ),
        None => Box::new(retrying),
    };
    Ok(Arc::new(Metered::new(stack)))
}
