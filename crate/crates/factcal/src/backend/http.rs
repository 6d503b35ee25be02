//! HTTP client for open chat-completions endpoints (the JSON shape served by
//! most hosted and self-hosted model servers).

use std::time::Duration;

use rand::Rng;

use super::{
    validate_request, validate_sampling, Backend, BackendError, CompletionRequest,
    CompletionResult, FinishReason, TokenAlternative, TokenLogprob,
};

/// Environment variable holding the endpoint base URL.
pub const ENDPOINT_ENV: &str = "FACTCAL_BACKEND_URL";
/// Environment variable holding the bearer credential, if the endpoint needs one.
pub const TOKEN_ENV: &str = "FACTCAL_API_TOKEN";

const MAX_ATTEMPTS: u32 = 3;
const BASE_BACKOFF_MS: u64 = 200;

/// Chat-completions client with bounded, jittered retry on transport
/// failures and retryable statuses.
pub struct HttpBackend {
    endpoint: String,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(endpoint: &str, token: Option<String>) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .connect_timeout(Duration::from_secs(10))
            .build()
            .map_err(|e| BackendError::InvalidRequest(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            endpoint: normalize_endpoint(endpoint)?,
            token,
            client,
        })
    }

    /// Builds a client from `FACTCAL_BACKEND_URL` and `FACTCAL_API_TOKEN`.
    pub fn from_env() -> Result<Self, BackendError> {
        let endpoint = std::env::var(ENDPOINT_ENV).map_err(|_| {
            BackendError::InvalidRequest(format!("{ENDPOINT_ENV} is not set"))
        })?;
        let token = std::env::var(TOKEN_ENV).ok();
        Self::new(&endpoint, token)
    }

    fn payload(request: &CompletionRequest) -> serde_json::Value {
        let mut payload = serde_json::json!({
            "model": request.model_id,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if request.want_logprobs {
            payload["logprobs"] = serde_json::json!(true);
            payload["top_logprobs"] = serde_json::json!(request.top_logprobs.unwrap_or(5));
        }
        if let Some(seed) = request.seed {
            payload["seed"] = serde_json::json!(seed);
        }
        payload
    }

    fn send_once(&self, payload: &serde_json::Value) -> Result<serde_json::Value, SendFailure> {
        let mut builder = self.client.post(&self.endpoint).json(payload);
        if let Some(token) = &self.token {
            builder = builder.header("Authorization", format!("Bearer {token}"));
        }
        let response = builder.send().map_err(|e| SendFailure::Retryable(e.to_string()))?;
        let status = response.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(SendFailure::Retryable(format!("endpoint returned status {status}")));
        }
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            let head: String = body.chars().take(300).collect();
            return Err(SendFailure::Fatal(BackendError::Api(format!("status {status}: {head}"))));
        }
        response
            .json::<serde_json::Value>()
            .map_err(|e| SendFailure::Fatal(BackendError::MalformedResponse(e.to_string())))
    }

    fn send_with_retries(&self, payload: &serde_json::Value) -> Result<serde_json::Value, BackendError> {
        let mut last_message = String::new();
        for attempt in 1..=MAX_ATTEMPTS {
            match self.send_once(payload) {
                Ok(value) => return Ok(value),
                Err(SendFailure::Fatal(err)) => return Err(err),
                Err(SendFailure::Retryable(message)) => {
                    last_message = message;
                    if attempt < MAX_ATTEMPTS {
                        std::thread::sleep(backoff_delay(attempt));
                    }
                }
            }
        }
        Err(BackendError::Transport {
            attempts: MAX_ATTEMPTS,
            message: last_message,
        })
    }

    fn parse(&self, value: serde_json::Value, want_logprobs: bool) -> Result<CompletionResult, BackendError> {
        let choice = value
            .get("choices")
            .and_then(|c| c.as_array())
            .and_then(|c| c.first())
            .ok_or_else(|| BackendError::MalformedResponse("no choices in response".to_string()))?;
        let text = choice
            .pointer("/message/content")
            .and_then(|v| v.as_str())
            .ok_or_else(|| BackendError::MalformedResponse("choice has no message content".to_string()))?
            .to_string();
        let finish_reason = match choice.get("finish_reason").and_then(|v| v.as_str()) {
            Some("stop") => FinishReason::Stop,
            Some("length") => FinishReason::Length,
            _ => FinishReason::Other,
        };
        let token_logprobs = match choice.pointer("/logprobs/content").and_then(|v| v.as_array()) {
            Some(entries) => {
                let mut tokens = Vec::with_capacity(entries.len());
                for entry in entries {
                    tokens.push(parse_token_logprob(entry)?);
                }
                Some(tokens)
            }
            None => None,
        };
        if want_logprobs && token_logprobs.is_none() {
            return Err(BackendError::Capability {
                backend: self.name().to_string(),
                message: "endpoint returned no logprobs; use an estimator that does not need them"
                    .to_string(),
            });
        }
        Ok(CompletionResult { text, token_logprobs, finish_reason })
    }
}

enum SendFailure {
    Retryable(String),
    Fatal(BackendError),
}

fn parse_token_logprob(entry: &serde_json::Value) -> Result<TokenLogprob, BackendError> {
    let token = entry
        .get("token")
        .and_then(|v| v.as_str())
        .ok_or_else(|| BackendError::MalformedResponse("logprob entry has no token".to_string()))?
        .to_string();
    let logprob = entry
        .get("logprob")
        .and_then(|v| v.as_f64())
        .ok_or_else(|| BackendError::MalformedResponse("logprob entry has no logprob".to_string()))?;
    let alternatives = entry
        .get("top_logprobs")
        .and_then(|v| v.as_array())
        .map(|alts| {
            alts.iter()
                .filter_map(|alt| {
                    Some(TokenAlternative {
                        token: alt.get("token")?.as_str()?.to_string(),
                        logprob: alt.get("logprob")?.as_f64()?,
                    })
                })
                .collect()
        })
        .unwrap_or_default();
    Ok(TokenLogprob { token, logprob, alternatives })
}

fn backoff_delay(attempt: u32) -> Duration {
    let base = BASE_BACKOFF_MS * (1u64 << (attempt - 1));
    let jitter = rand::thread_rng().gen_range(0.5..1.5);
    Duration::from_millis((base as f64 * jitter) as u64)
}

fn normalize_endpoint(endpoint: &str) -> Result<String, BackendError> {
    let trimmed = endpoint.trim().trim_end_matches('/');
    if trimmed.is_empty() {
        return Err(BackendError::InvalidRequest("endpoint URL is empty".to_string()));
    }
    if !(trimmed.starts_with("http://") || trimmed.starts_with("https://")) {
        return Err(BackendError::InvalidRequest(format!(
            "endpoint `{trimmed}` must start with http:// or https://"
        )));
    }
    if trimmed.ends_with("/chat/completions") {
        return Ok(trimmed.to_string());
    }
    if trimmed.ends_with("/v1") {
        return Ok(format!("{trimmed}/chat/completions"));
    }
    Ok(format!("{trimmed}/v1/chat/completions"))
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn supports_logprobs(&self) -> bool {
        // Only discoverable per call; a response without requested logprobs
        // fails with a capability error in `parse`.
        true
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        validate_request(request)?;
        let value = self.send_with_retries(&Self::payload(request))?;
        self.parse(value, request.want_logprobs)
    }

    fn sample_n(&self, request: &CompletionRequest, n: usize) -> Result<Vec<CompletionResult>, BackendError> {
        validate_sampling(request, n)?;
        let mut successes = Vec::with_capacity(n);
        for i in 0..n {
            // Distinct seeds keep the samples independent on endpoints that
            // honor seeding; without a seed the endpoint samples freely.
            let sample_request = request.clone().with_seed(request.seed.map(|s| s + i as u64));
            match self.complete(&sample_request) {
                Ok(result) => successes.push(result),
                Err(cause) => {
                    return Err(BackendError::Sample {
                        requested: n,
                        successes,
                        cause: Box::new(cause),
                    })
                }
            }
        }
        Ok(successes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_normalization_appends_the_standard_path() {
        assert_eq!(
            normalize_endpoint("http://localhost:8000").unwrap(),
            "http://localhost:8000/v1/chat/completions"
        );
        assert_eq!(
            normalize_endpoint("https://api.example.com/v1/").unwrap(),
            "https://api.example.com/v1/chat/completions"
        );
        assert_eq!(
            normalize_endpoint("https://api.example.com/v1/chat/completions").unwrap(),
            "https://api.example.com/v1/chat/completions"
        );
        assert!(normalize_endpoint("localhost:8000").is_err());
        assert!(normalize_endpoint("  ").is_err());
    }

    #[test]
    fn payload_includes_logprob_fields_only_on_request() {
        let req = CompletionRequest::new("m", vec![super::super::Message::user("hi")]);
        let plain = HttpBackend::payload(&req);
        assert!(plain.get("logprobs").is_none());
        assert!(plain.get("seed").is_none());
        let with = HttpBackend::payload(&req.clone().with_logprobs(8).with_seed(Some(7)));
        assert_eq!(with["logprobs"], serde_json::json!(true));
        assert_eq!(with["top_logprobs"], serde_json::json!(8));
        assert_eq!(with["seed"], serde_json::json!(7));
    }

    #[test]
    fn parse_extracts_text_and_token_logprobs() {
        let backend = HttpBackend::new("http://localhost:1", None).unwrap();
        let value = serde_json::json!({
            "choices": [{
                "message": {"role": "assistant", "content": "True"},
                "finish_reason": "stop",
                "logprobs": {"content": [{
                    "token": "True",
                    "logprob": -0.1,
                    "top_logprobs": [
                        {"token": "True", "logprob": -0.1},
                        {"token": "False", "logprob": -2.4}
                    ]
                }]}
            }]
        });
        let result = backend.parse(value, true).unwrap();
        assert_eq!(result.text, "True");
        let tokens = result.token_logprobs.unwrap();
        assert_eq!(tokens[0].alternatives.len(), 2);
        assert_eq!(result.finish_reason, FinishReason::Stop);
    }

    #[test]
    fn missing_logprobs_is_a_capability_error_when_requested() {
        let backend = HttpBackend::new("http://localhost:1", None).unwrap();
        let value = serde_json::json!({
            "choices": [{"message": {"content": "ok"}, "finish_reason": "stop"}]
        });
        assert!(backend.parse(value.clone(), false).is_ok());
        assert!(matches!(
            backend.parse(value, true),
            Err(BackendError::Capability { .. })
        ));
    }

    #[test]
    fn backoff_grows_with_attempts_and_stays_bounded() {
        for attempt in 1..=2u32 {
            let d = backoff_delay(attempt);
            let base = BASE_BACKOFF_MS * (1 << (attempt - 1));
            assert!(d >= Duration::from_millis(base / 2));
            assert!(d <= Duration::from_millis(base * 3 / 2));
        }
    }
}
