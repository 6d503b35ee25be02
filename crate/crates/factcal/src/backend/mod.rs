//! Model backends: a common trait over chat-completion endpoints, a
//! deterministic scripted mock for tests and fixtures, an HTTP client for
//! open chat-completions endpoints, and a persistent response cache.

pub mod cache;
pub mod http;
pub mod mock;

pub use cache::{CacheMode, CachedBackend};
pub use http::HttpBackend;
pub use mock::{MockBackend, MockScript};

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Shared, thread-safe handle to a backend.
pub type BackendHandle = Arc<dyn Backend>;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint rejected the request: {0}")]
    Api(String),
    #[error("backend `{backend}` cannot satisfy the request: {message}")]
    Capability { backend: String, message: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("mock script problem: {0}")]
    Script(String),
    #[error("no mock script entry matches the prompt starting `{prompt_head}`")]
    ScriptMiss { prompt_head: String },
    #[error("malformed endpoint response: {0}")]
    MalformedResponse(String),
    #[error("sampling produced {} of {requested} samples before failing: {cause}", successes.len())]
    Sample {
        requested: usize,
        successes: Vec<CompletionResult>,
        cause: Box<BackendError>,
    },
    #[error("cache: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

/// One chat-completion call. Serialization of this struct is the canonical
/// form hashed into [`CacheKey`]s, so field order and skip rules are part of
/// the cache contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model_id: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub want_logprobs: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl CompletionRequest {
    pub fn new(model_id: impl Into<String>, messages: Vec<Message>) -> Self {
        Self {
            model_id: model_id.into(),
            messages,
            temperature: 0.0,
            max_tokens: 1024,
            want_logprobs: false,
            top_logprobs: None,
            seed: None,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    /// Requests per-token logprobs with `k` alternatives per position.
    pub fn with_logprobs(mut self, k: u8) -> Self {
        self.want_logprobs = true;
        self.top_logprobs = Some(k);
        self
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    /// All message contents joined by newlines; what mock matchers and
    /// error messages look at.
    pub fn prompt_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// One alternative token at a position, with its log-probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAlternative {
    pub token: String,
    pub logprob: f64,
}

/// A generated token with its log-probability and the top alternatives the
/// endpoint considered at that position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
    #[serde(default)]
    pub alternatives: Vec<TokenAlternative>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    pub finish_reason: FinishReason,
}

impl CompletionResult {
    pub fn text_only(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            token_logprobs: None,
            finish_reason: FinishReason::Stop,
        }
    }
}

/// Content digest identifying one completion call: backend name, model id,
/// and the canonical serialization of the request. Any change to any request
/// field yields a different key.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn for_completion(backend_name: &str, request: &CompletionRequest) -> Self {
        Self::digest(backend_name, request, None)
    }

    /// Key for a whole `sample_n` batch; distinct from any single-completion
    /// key for the same request.
    pub fn for_samples(backend_name: &str, request: &CompletionRequest, n: usize) -> Self {
        Self::digest(backend_name, request, Some(n))
    }

    fn digest(backend_name: &str, request: &CompletionRequest, samples: Option<usize>) -> Self {
        let canonical = serde_json::to_string(request).expect("completion request serializes");
        let mut hasher = Sha256::new();
        hasher.update(backend_name.as_bytes());
        hasher.update([0x1f]);
        hasher.update(request.model_id.as_bytes());
        hasher.update([0x1f]);
        hasher.update(canonical.as_bytes());
        if let Some(n) = samples {
            hasher.update([0x1f]);
            hasher.update(n.to_le_bytes());
        }
        Self(hex::encode(hasher.finalize()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// A chat-completion model endpoint.
pub trait Backend: Send + Sync {
    /// Stable name used in cache keys and error messages.
    fn name(&self) -> &str;

    /// Whether the backend can return per-token logprobs at all. Backends
    /// that only discover this per call still fail with
    /// [`BackendError::Capability`] when a response lacks requested logprobs.
    fn supports_logprobs(&self) -> bool;

    /// Runs one completion.
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError>;

    /// Draws `n` independent samples for the same request. Requires `n >= 1`
    /// and a strictly positive temperature; a mid-batch failure surfaces as
    /// [`BackendError::Sample`] carrying the samples already obtained.
    fn sample_n(&self, request: &CompletionRequest, n: usize) -> Result<Vec<CompletionResult>, BackendError>;
}

pub(crate) fn validate_request(request: &CompletionRequest) -> Result<(), BackendError> {
    if request.messages.is_empty() {
        return Err(BackendError::InvalidRequest("messages must be non-empty".to_string()));
    }
    Ok(())
}

pub(crate) fn validate_sampling(request: &CompletionRequest, n: usize) -> Result<(), BackendError> {
    validate_request(request)?;
    if n == 0 {
        return Err(BackendError::InvalidRequest("sample count must be at least 1".to_string()));
    }
    if request.temperature <= 0.0 {
        return Err(BackendError::InvalidRequest(
            "sampling requires a strictly positive temperature".to_string(),
        ));
    }
    Ok(())
}
