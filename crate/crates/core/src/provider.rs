//! Uniform LLM transport behind one completion contract.
//!
//! Four providers implement [`CompletionProvider`]: a live HTTP client for
//! any chat-completions-compatible endpoint, a recorder that persists every
//! exchange to a cassette, a replayer that serves only recorded exchanges
//! (zero network), and a scripted provider for tests. Requests are keyed by a
//! stable fingerprint over (model, messages, temperature); the token limit is
//! deliberately excluded so limit tweaks do not invalidate cassettes.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::VecDeque;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl ChatRequest {
    /// A single-user-message request.
    pub fn user(model: &str, prompt: &str, temperature: f64, max_output_tokens: u32) -> Self {
        ChatRequest {
            model: model.to_string(),
            messages: vec![Message::user(prompt)],
            temperature,
            max_output_tokens,
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.messages.is_empty() {
            return Err(ProviderError::InvalidRequest(
                "messages must not be empty".into(),
            ));
        }
        if self.messages.last().map(|m| m.role) != Some(Role::User) {
            return Err(ProviderError::InvalidRequest(
                "last message must have role user".into(),
            ));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(ProviderError::InvalidRequest(
                "temperature must be >= 0".into(),
            ));
        }
        if self.max_output_tokens == 0 {
            return Err(ProviderError::InvalidRequest(
                "max_output_tokens must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Stable content hash over (model, messages, temperature); equal
    /// requests fingerprint identically across process runs.
    pub fn fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct View<'a> {
            model: &'a str,
            messages: &'a [Message],
            temperature: f64,
        }
        let canon = serde_json::to_vec(&View {
            model: &self.model,
            messages: &self.messages,
            temperature: self.temperature,
        })
        .expect("request serialization cannot fail");
        hex::encode(&Sha256::digest(&canon)[..16])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
    pub latency_ms: u64,
}

impl ChatResponse {
    pub fn stopped(text: impl Into<String>) -> Self {
        ChatResponse {
            text: text.into(),
            finish_reason: FinishReason::Stop,
            usage: None,
            latency_ms: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("API error (status {status}): {message}")]
    Api { status: u16, message: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no recorded response for fingerprint {fingerprint}")]
    CassetteMiss { fingerprint: String },
    #[error("scripted provider has no more queued responses")]
    ScriptExhausted,
    #[error("cassette I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("cassette line {line}: {message}")]
    CassetteFormat { line: usize, message: String },
    #[error("retries exhausted after {attempts} attempts: {source}")]
    RetriesExhausted {
        attempts: u32,
        #[source]
        source: Box<ProviderError>,
    },
}

impl ProviderError {
    /// Transient failures worth another attempt; everything else fails fast.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            ProviderError::Transport(_) | ProviderError::RateLimited(_)
        )
    }
}

/// The one completion contract every transport implements. Providers are safe
/// for concurrent `complete` calls.
pub trait CompletionProvider: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError>;

    fn name(&self) -> &str {
        "provider"
    }

    /// A fixed timestamp associated with the provider's data source (cassette
    /// creation time), when one exists. Lets batch jobs stamp records
    /// deterministically under replay.
    fn origin_timestamp(&self) -> Option<String> {
        None
    }
}

impl<T: CompletionProvider + ?Sized> CompletionProvider for &T {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        (**self).complete(request)
    }

    fn name(&self) -> &str {
        (**self).name()
    }

    fn origin_timestamp(&self) -> Option<String> {
        (**self).origin_timestamp()
    }
}

impl CompletionProvider for Box<dyn CompletionProvider> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        (**self).complete(request)
    }

    fn name(&self) -> &str {
        (**self).name()
    }

    fn origin_timestamp(&self) -> Option<String> {
        (**self).origin_timestamp()
    }
}

// ---------------------------------------------------------------------------
// Scripted provider
// ---------------------------------------------------------------------------

/// Pops pre-queued responses (or errors) in order; for tests and offline
/// fixtures.
#[derive(Default)]
pub struct ScriptedProvider {
    queue: Mutex<VecDeque<Result<ChatResponse, ProviderError>>>,
    seen: Mutex<Vec<ChatRequest>>,
    origin: Option<String>,
}

impl ScriptedProvider {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fixed origin timestamp reported to batch jobs.
    pub fn with_origin(mut self, timestamp: &str) -> Self {
        self.origin = Some(timestamp.to_string());
        self
    }

    pub fn push_text(&self, text: &str) {
        self.queue
            .lock()
            .unwrap()
            .push_back(Ok(ChatResponse::stopped(text)));
    }

    pub fn push_response(&self, response: ChatResponse) {
        self.queue.lock().unwrap().push_back(Ok(response));
    }

    pub fn push_error(&self, error: ProviderError) {
        self.queue.lock().unwrap().push_back(Err(error));
    }

    /// Requests seen so far, in order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.lock().unwrap().clone()
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().unwrap().len()
    }
}

impl CompletionProvider for ScriptedProvider {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        request.validate()?;
        self.seen.lock().unwrap().push(request.clone());
        self.queue
            .lock()
            .unwrap()
            .pop_front()
            .ok_or(ProviderError::ScriptExhausted)?
    }

    fn name(&self) -> &str {
        "scripted"
    }

    fn origin_timestamp(&self) -> Option<String> {
        self.origin.clone()
    }
}

// ---------------------------------------------------------------------------
// Cassettes: record and replay
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteMetadata {
    pub cassette_version: u32,
    pub created_at: String,
    pub provider_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub fingerprint: String,
    pub request: ChatRequest,
    pub response: ChatResponse,
}

/// An in-memory cassette: fingerprint-keyed exchanges plus metadata. The file
/// format is JSON Lines — a metadata header line, then one entry per line.
#[derive(Debug, Clone)]
pub struct Cassette {
    pub metadata: CassetteMetadata,
    pub entries: IndexMap<String, CassetteEntry>,
}

impl Cassette {
    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let file = File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| ProviderError::CassetteFormat {
                line: 1,
                message: "cassette file is empty".into(),
            })?;
        let metadata: CassetteMetadata =
            serde_json::from_str(&header).map_err(|e| ProviderError::CassetteFormat {
                line: 1,
                message: e.to_string(),
            })?;
        let mut entries = IndexMap::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CassetteEntry =
                serde_json::from_str(&line).map_err(|e| ProviderError::CassetteFormat {
                    line: i + 2,
                    message: e.to_string(),
                })?;
            entries.insert(entry.fingerprint.clone(), entry);
        }
        Ok(Cassette { metadata, entries })
    }
}

/// Serves only recorded exchanges; never touches the network.
pub struct ReplayProvider {
    cassette: Cassette,
}

impl ReplayProvider {
    pub fn open(path: &Path) -> Result<Self, ProviderError> {
        Ok(ReplayProvider {
            cassette: Cassette::load(path)?,
        })
    }

    pub fn from_cassette(cassette: Cassette) -> Self {
        ReplayProvider { cassette }
    }

    pub fn len(&self) -> usize {
        self.cassette.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cassette.entries.is_empty()
    }
}

impl CompletionProvider for ReplayProvider {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        request.validate()?;
        let fingerprint = request.fingerprint();
        self.cassette
            .entries
            .get(&fingerprint)
            .map(|entry| entry.response.clone())
            .ok_or(ProviderError::CassetteMiss { fingerprint })
    }

    fn name(&self) -> &str {
        "replay"
    }

    fn origin_timestamp(&self) -> Option<String> {
        Some(self.cassette.metadata.created_at.clone())
    }
}

struct RecordState {
    entries: IndexMap<String, CassetteEntry>,
    file: File,
}

/// Forwards to an inner provider and persists every new exchange. A
/// fingerprint already on file is served from the cassette instead of being
/// re-forwarded, which keeps fingerprints unique and recording idempotent.
pub struct RecordProvider<P> {
    inner: P,
    state: Mutex<RecordState>,
}

impl<P: CompletionProvider> RecordProvider<P> {
    /// Open (or create) a cassette at `path` for appending.
    pub fn open(path: &Path, inner: P) -> Result<Self, ProviderError> {
        let entries = if path.exists() {
            Cassette::load(path)?.entries
        } else {
            ensure_parent_dir(path)?;
            let mut file = File::create(path)?;
            let metadata = CassetteMetadata {
                cassette_version: 1,
                created_at: now_rfc3339(),
                provider_name: inner.name().to_string(),
            };
            writeln!(file, "{}", serde_json::to_string(&metadata).unwrap())?;
            file.sync_data()?;
            IndexMap::new()
        };
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(RecordProvider {
            inner,
            state: Mutex::new(RecordState { entries, file }),
        })
    }

    pub fn recorded(&self) -> usize {
        self.state.lock().unwrap().entries.len()
    }
}

impl<P: CompletionProvider> CompletionProvider for RecordProvider<P> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        request.validate()?;
        let fingerprint = request.fingerprint();
        if let Some(entry) = self.state.lock().unwrap().entries.get(&fingerprint) {
            return Ok(entry.response.clone());
        }
        let response = self.inner.complete(request)?;
        let entry = CassetteEntry {
            fingerprint: fingerprint.clone(),
            request: request.clone(),
            response: response.clone(),
        };
        let mut state = self.state.lock().unwrap();
        // A concurrent call may have recorded the same request meanwhile.
        if !state.entries.contains_key(&fingerprint) {
            writeln!(state.file, "{}", serde_json::to_string(&entry).unwrap())?;
            state.file.sync_data()?;
            state.entries.insert(fingerprint, entry);
        }
        Ok(response)
    }

    fn name(&self) -> &str {
        "record"
    }

    fn origin_timestamp(&self) -> Option<String> {
        self.inner.origin_timestamp()
    }
}

// ---------------------------------------------------------------------------
// Live HTTP provider
// ---------------------------------------------------------------------------

/// Environment variable holding the bearer token for live/record modes.
pub const API_KEY_ENV: &str = "LLM_API_KEY";

/// Live transport. Wire shape: POST {base_url}/chat/completions with a JSON
/// body `{model, messages, temperature, max_tokens}` and a bearer token; the
/// first choice's message content becomes the response text.
pub struct HttpProvider {
    agent: ureq::Agent,
    base_url: String,
    api_key: String,
}

impl HttpProvider {
    pub fn new(base_url: &str, api_key: &str) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build();
        HttpProvider {
            agent: config.into(),
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key: api_key.to_string(),
        }
    }

    pub fn from_env(base_url: &str) -> Result<Self, ProviderError> {
        let key = std::env::var(API_KEY_ENV)
            .map_err(|_| ProviderError::Auth(format!("{API_KEY_ENV} is not set")))?;
        Ok(Self::new(base_url, &key))
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl CompletionProvider for HttpProvider {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        request.validate()?;
        let url = format!("{}/chat/completions", self.base_url);
        let body = WireRequest {
            model: &request.model,
            messages: &request.messages,
            temperature: request.temperature,
            max_tokens: request.max_output_tokens,
        };
        let started = Instant::now();
        let mut response = self
            .agent
            .post(&url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let latency_ms = started.elapsed().as_millis() as u64;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        match status {
            200..=299 => {}
            401 | 403 => return Err(ProviderError::Auth(truncate(&text))),
            429 => return Err(ProviderError::RateLimited(truncate(&text))),
            500..=599 => {
                return Err(ProviderError::Transport(format!(
                    "server returned {status}: {}",
                    truncate(&text)
                )))
            }
            _ => {
                return Err(ProviderError::Api {
                    status,
                    message: truncate(&text),
                })
            }
        }
        let wire: WireResponse = serde_json::from_str(&text).map_err(|e| ProviderError::Api {
            status,
            message: format!("malformed response body: {e}"),
        })?;
        let choice = wire.choices.into_iter().next().ok_or(ProviderError::Api {
            status,
            message: "response has no choices".into(),
        })?;
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            Some("error") => FinishReason::Error,
            _ => FinishReason::Stop,
        };
        Ok(ChatResponse {
            text: choice.message.content.unwrap_or_default(),
            finish_reason,
            usage: wire.usage.map(|u| Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            }),
            latency_ms,
        })
    }

    fn name(&self) -> &str {
        "http"
    }
}

fn truncate(text: &str) -> String {
    const LIMIT: usize = 200;
    if text.len() <= LIMIT {
        return text.to_string();
    }
    let mut end = LIMIT;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}…", &text[..end])
}

fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

// ---------------------------------------------------------------------------
// Retries
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 100,
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Backoff before retry number `k` (0-based): base · multiplier^k.
    pub fn delay(&self, k: u32) -> Duration {
        Duration::from_millis((self.base_delay_ms as f64 * self.multiplier.powi(k as i32)) as u64)
    }
}

/// A completion plus how many provider calls it took.
#[derive(Debug, Clone)]
pub struct Completion {
    pub response: ChatResponse,
    pub attempts: u32,
}

/// Retry retryable errors with exponential backoff; non-retryable errors fail
/// on the spot.
pub fn with_retries(
    provider: &dyn CompletionProvider,
    request: &ChatRequest,
    policy: &RetryPolicy,
) -> Result<Completion, ProviderError> {
    with_retries_using(provider, request, policy, &mut std::thread::sleep)
}

/// Same as [`with_retries`] with an injectable sleeper, so tests can assert
/// the delay sequence without waiting it out.
pub fn with_retries_using(
    provider: &dyn CompletionProvider,
    request: &ChatRequest,
    policy: &RetryPolicy,
    sleep: &mut dyn FnMut(Duration),
) -> Result<Completion, ProviderError> {
    assert!(
        policy.max_attempts >= 1,
        "retry policy needs max_attempts >= 1"
    );
    let mut attempt = 0;
    loop {
        attempt += 1;
        match provider.complete(request) {
            Ok(response) => {
                return Ok(Completion {
                    response,
                    attempts: attempt,
                })
            }
            Err(e) if !e.is_retryable() => return Err(e),
            Err(e) if attempt >= policy.max_attempts => {
                return Err(ProviderError::RetriesExhausted {
                    attempts: attempt,
                    source: Box::new(e),
                })
            }
            Err(_) => sleep(policy.delay(attempt - 1)),
        }
    }
}

/// Wraps any provider and counts calls; used to assert call budgets.
pub struct CountingProvider<P> {
    inner: P,
    calls: AtomicU64,
}

impl<P: CompletionProvider> CountingProvider<P> {
    pub fn new(inner: P) -> Self {
        CountingProvider {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<P: CompletionProvider> CompletionProvider for CountingProvider<P> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request)
    }

    fn name(&self) -> &str {
        self.inner.name()
    }

    fn origin_timestamp(&self) -> Option<String> {
        self.inner.origin_timestamp()
    }
}

/// Load a scripted provider from a JSON Lines file: each line is either a
/// bare JSON string or an object `{"text": ...}`.
pub fn scripted_from_file(path: &Path) -> Result<ScriptedProvider, ProviderError> {
    let file = File::open(path)?;
    let provider = ScriptedProvider::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let text = match serde_json::from_str::<serde_json::Value>(&line) {
            Ok(serde_json::Value::String(s)) => s,
            Ok(serde_json::Value::Object(map)) => map
                .get("text")
                .and_then(|v| v.as_str())
                .map(str::to_string)
                .ok_or(ProviderError::CassetteFormat {
                    line: i + 1,
                    message: "script object lacks a \"text\" field".into(),
                })?,
            _ => {
                return Err(ProviderError::CassetteFormat {
                    line: i + 1,
                    message: "script line must be a JSON string or {\"text\": ...}".into(),
                })
            }
        };
        provider.push_text(&text);
    }
    Ok(provider)
}

pub(crate) fn ensure_parent_dir(path: &Path) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Read;
    use std::net::TcpListener;

    fn request(prompt: &str) -> ChatRequest {
        ChatRequest::user("test-model", prompt, 0.0, 256)
    }

    #[test]
    fn fingerprint_is_stable_and_ignores_token_limit() {
        let a = request("hello");
        let mut b = request("hello");
        b.max_output_tokens = 9999;
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = request("other");
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn request_invariants_are_enforced() {
        let empty = ChatRequest {
            model: "m".into(),
            messages: vec![],
            temperature: 0.0,
            max_output_tokens: 10,
        };
        assert!(matches!(
            empty.validate(),
            Err(ProviderError::InvalidRequest(_))
        ));
        let assistant_last = ChatRequest {
            model: "m".into(),
            messages: vec![Message::assistant("hi")],
            temperature: 0.0,
            max_output_tokens: 10,
        };
        assert!(assistant_last.validate().is_err());
        assert!(request("ok").validate().is_ok());
    }

    #[test]
    fn scripted_pops_in_order_then_exhausts() {
        let provider = ScriptedProvider::new();
        provider.push_text("first");
        provider.push_text("second");
        assert_eq!(provider.complete(&request("a")).unwrap().text, "first");
        assert_eq!(provider.complete(&request("b")).unwrap().text, "second");
        assert!(matches!(
            provider.complete(&request("c")),
            Err(ProviderError::ScriptExhausted)
        ));
        assert_eq!(provider.requests().len(), 3);
    }

    #[test]
    fn record_then_replay_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cassette.jsonl");
        let scripted = ScriptedProvider::new();
        scripted.push_text("alpha");
        scripted.push_text("beta");
        scripted.push_text("gamma");
        let recorder = RecordProvider::open(&path, scripted).unwrap();
        for prompt in ["p1", "p2", "p3"] {
            recorder.complete(&request(prompt)).unwrap();
        }
        assert_eq!(recorder.recorded(), 3);
        drop(recorder);

        let cassette = Cassette::load(&path).unwrap();
        assert_eq!(cassette.entries.len(), 3);
        assert_eq!(cassette.metadata.cassette_version, 1);

        let replay = ReplayProvider::open(&path).unwrap();
        let again = replay.complete(&request("p2")).unwrap();
        assert_eq!(again.text, "beta");
        assert_eq!(replay.complete(&request("p2")).unwrap(), again);
    }

    #[test]
    fn replay_miss_names_the_fingerprint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cassette.jsonl");
        let recorder = RecordProvider::open(&path, ScriptedProvider::new()).unwrap();
        drop(recorder);
        let replay = ReplayProvider::open(&path).unwrap();
        let wanted = request("unseen");
        match replay.complete(&wanted) {
            Err(ProviderError::CassetteMiss { fingerprint }) => {
                assert_eq!(fingerprint, wanted.fingerprint())
            }
            other => panic!("expected cassette miss, got {other:?}"),
        }
    }

    struct PanickingProvider;

    impl CompletionProvider for PanickingProvider {
        fn complete(&self, _: &ChatRequest) -> Result<ChatResponse, ProviderError> {
            panic!("transport must not be touched");
        }
    }

    #[test]
    fn recorded_fingerprints_never_reforward() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cassette.jsonl");
        let scripted = ScriptedProvider::new();
        scripted.push_text("cached");
        let recorder = RecordProvider::open(&path, scripted).unwrap();
        recorder.complete(&request("p")).unwrap();
        drop(recorder);
        // Same cassette, a transport that panics on use: cache hits only.
        let recorder = RecordProvider::open(&path, PanickingProvider).unwrap();
        assert_eq!(recorder.complete(&request("p")).unwrap().text, "cached");
    }

    #[test]
    fn retry_succeeds_after_transient_failures() {
        let provider = ScriptedProvider::new();
        provider.push_error(ProviderError::Transport("503".into()));
        provider.push_error(ProviderError::Transport("503".into()));
        provider.push_text("ok");
        let mut delays = Vec::new();
        let policy = RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 100,
            multiplier: 2.0,
        };
        let completion = with_retries_using(&provider, &request("p"), &policy, &mut |d| {
            delays.push(d.as_millis() as u64)
        })
        .unwrap();
        assert_eq!(completion.attempts, 3);
        assert_eq!(completion.response.text, "ok");
        assert_eq!(delays, [100, 200]);
    }

    #[test]
    fn retry_exhaustion_wraps_last_error() {
        let provider = ScriptedProvider::new();
        for _ in 0..3 {
            provider.push_error(ProviderError::RateLimited("slow down".into()));
        }
        let mut delays = Vec::new();
        let err = with_retries_using(
            &provider,
            &request("p"),
            &RetryPolicy::default(),
            &mut |d| delays.push(d.as_millis() as u64),
        )
        .unwrap_err();
        match err {
            ProviderError::RetriesExhausted { attempts, source } => {
                assert_eq!(attempts, 3);
                assert!(matches!(*source, ProviderError::RateLimited(_)));
            }
            other => panic!("expected exhaustion, got {other:?}"),
        }
        assert_eq!(delays, [100, 200]);
    }

    #[test]
    fn auth_error_never_retries() {
        let provider = ScriptedProvider::new();
        provider.push_error(ProviderError::Auth("bad key".into()));
        provider.push_text("never reached");
        let mut slept = 0;
        let err = with_retries_using(
            &provider,
            &request("p"),
            &RetryPolicy::default(),
            &mut |_| slept += 1,
        )
        .unwrap_err();
        assert!(matches!(err, ProviderError::Auth(_)));
        assert_eq!(slept, 0);
        assert_eq!(provider.remaining(), 1);
    }

    #[test]
    fn first_attempt_success_is_single_call() {
        let provider = ScriptedProvider::new();
        provider.push_text("done");
        let completion = with_retries(&provider, &request("p"), &RetryPolicy::default()).unwrap();
        assert_eq!(completion.attempts, 1);
    }

    /// Minimal HTTP/1.1 server: answers each queued (status, body) on one
    /// connection, then stops.
    fn spawn_http_server(responses: Vec<(u16, String)>) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = Vec::new();
                let mut byte = [0u8; 1];
                while !buf.ends_with(b"\r\n\r\n") {
                    if stream.read(&mut byte).unwrap() == 0 {
                        break;
                    }
                    buf.push(byte[0]);
                }
                let headers = String::from_utf8_lossy(&buf).to_string();
                let content_length: usize = headers
                    .lines()
                    .find_map(|l| {
                        l.to_ascii_lowercase()
                            .strip_prefix("content-length:")
                            .map(|v| v.trim().parse().unwrap())
                    })
                    .unwrap_or(0);
                let mut body_buf = vec![0u8; content_length];
                stream.read_exact(&mut body_buf).unwrap();
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        format!("http://{addr}")
    }

    fn ok_body(text: &str) -> String {
        serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
            "usage": {"prompt_tokens": 7, "completion_tokens": 3}
        })
        .to_string()
    }

    #[test]
    fn http_provider_happy_path() {
        let base = spawn_http_server(vec![(200, ok_body("hello from wire"))]);
        let provider = HttpProvider::new(&base, "k");
        let response = provider.complete(&request("hi")).unwrap();
        assert_eq!(response.text, "hello from wire");
        assert_eq!(response.finish_reason, FinishReason::Stop);
        assert_eq!(
            response.usage,
            Some(Usage {
                prompt_tokens: 7,
                completion_tokens: 3
            })
        );
    }

    #[test]
    fn http_provider_maps_statuses() {
        let base = spawn_http_server(vec![
            (401, "{\"error\": \"bad key\"}".into()),
            (429, "{\"error\": \"slow down\"}".into()),
            (503, "{\"error\": \"overloaded\"}".into()),
        ]);
        let provider = HttpProvider::new(&base, "k");
        assert!(matches!(
            provider.complete(&request("a")),
            Err(ProviderError::Auth(_))
        ));
        assert!(matches!(
            provider.complete(&request("b")),
            Err(ProviderError::RateLimited(_))
        ));
        assert!(matches!(
            provider.complete(&request("c")),
            Err(ProviderError::Transport(_))
        ));
    }

    #[test]
    fn http_provider_retries_through_503() {
        let base = spawn_http_server(vec![
            (503, "{}".into()),
            (503, "{}".into()),
            (200, ok_body("finally")),
        ]);
        let provider = HttpProvider::new(&base, "k");
        let mut delays = Vec::new();
        let policy = RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 100,
            multiplier: 2.0,
        };
        let completion = with_retries_using(&provider, &request("p"), &policy, &mut |d| {
            delays.push(d.as_millis() as u64)
        })
        .unwrap();
        assert_eq!(completion.attempts, 3);
        assert_eq!(completion.response.text, "finally");
        assert_eq!(delays, [100, 200]);
    }

    #[test]
    fn counting_provider_counts() {
        let scripted = ScriptedProvider::new();
        scripted.push_text("a");
        scripted.push_text("b");
        let counter = CountingProvider::new(scripted);
        counter.complete(&request("1")).unwrap();
        counter.complete(&request("2")).unwrap();
        assert_eq!(counter.calls(), 2);
    }

    #[test]
    fn scripted_file_loads_strings_and_objects() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.jsonl");
        std::fs::write(&path, "\"plain\"\n{\"text\": \"wrapped\"}\n").unwrap();
        let provider = scripted_from_file(&path).unwrap();
        assert_eq!(provider.complete(&request("a")).unwrap().text, "plain");
        assert_eq!(provider.complete(&request("b")).unwrap().text, "wrapped");
    }
}
