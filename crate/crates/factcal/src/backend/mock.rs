//! Scripted mock backend: serves canned completions keyed on prompt content,
//! deterministically, for tests and golden fixtures.

use std::path::Path;
use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{
    validate_request, validate_sampling, Backend, BackendError, CompletionRequest,
    CompletionResult, FinishReason, TokenLogprob,
};

/// How a script entry decides whether it applies to a request. Matchers run
/// against the request's joined message contents; the first matching entry
/// in script order wins.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    /// The joined prompt equals this string exactly.
    Equals(String),
    /// The joined prompt contains this substring.
    Contains(String),
    /// The joined prompt contains every one of these substrings.
    ContainsAll(Vec<String>),
}

impl Matcher {
    fn matches(&self, prompt: &str) -> bool {
        match self {
            Self::Equals(s) => prompt == s,
            Self::Contains(s) => prompt.contains(s),
            Self::ContainsAll(parts) => parts.iter().all(|p| prompt.contains(p)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(rename = "match")]
    pub matcher: Matcher,
    /// Completion texts. `complete` always serves the first one; `sample_n`
    /// serves the first `n` in order.
    #[serde(default)]
    pub responses: Vec<String>,
    /// Token logprobs attached to completions when the request asks for them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    /// Fail the first this-many matching calls with a transport error, then
    /// behave normally. Exercises caller-side failure handling.
    #[serde(default)]
    pub fail_times: u32,
    /// Always fail with a transport error.
    #[serde(default)]
    pub fail: bool,
}

/// On-disk script format for [`MockBackend::scripted`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockScript {
    /// Whether this mock claims logprob support at all.
    #[serde(default = "default_true")]
    pub logprobs_supported: bool,
    pub entries: Vec<ScriptEntry>,
}

fn default_true() -> bool {
    true
}

struct RuntimeEntry {
    entry: ScriptEntry,
    failures_served: AtomicU32,
}

type Handler = Box<dyn Fn(&CompletionRequest) -> Result<CompletionResult, BackendError> + Send + Sync>;

enum Behavior {
    Scripted(Vec<RuntimeEntry>),
    Handler(Handler),
}

/// Deterministic test double for [`Backend`]: either a content-keyed script
/// (the production mock, loadable from a file) or an arbitrary handler
/// function for programmatic tests.
pub struct MockBackend {
    behavior: Behavior,
    logprobs_supported: bool,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn scripted(script: MockScript) -> Self {
        let logprobs_supported = script.logprobs_supported;
        let entries = script
            .entries
            .into_iter()
            .map(|entry| RuntimeEntry { entry, failures_served: AtomicU32::new(0) })
            .collect();
        Self {
            behavior: Behavior::Scripted(entries),
            logprobs_supported,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_script_file(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Script(format!("{}: {e}", path.display())))?;
        let script: MockScript = serde_json::from_str(&text)
            .map_err(|e| BackendError::Script(format!("{}: {e}", path.display())))?;
        Ok(Self::scripted(script))
    }

    /// Wraps a closure as a backend; handy for adversarial tests that need
    /// responses computed from the request.
    pub fn from_fn<F>(f: F) -> Self
    where
        F: Fn(&CompletionRequest) -> Result<CompletionResult, BackendError> + Send + Sync + 'static,
    {
        Self {
            behavior: Behavior::Handler(Box::new(f)),
            logprobs_supported: true,
            calls: AtomicUsize::new(0),
        }
    }

    /// Number of `complete`/`sample_n` invocations served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn find_entry(&self, prompt: &str) -> Result<&RuntimeEntry, BackendError> {
        let Behavior::Scripted(entries) = &self.behavior else {
            unreachable!("find_entry is only called for scripted mocks");
        };
        entries
            .iter()
            .find(|e| e.entry.matcher.matches(prompt))
            .ok_or_else(|| BackendError::ScriptMiss {
                prompt_head: prompt.chars().take(120).collect(),
            })
    }

    fn serve(&self, runtime: &RuntimeEntry, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        let entry = &runtime.entry;
        if entry.fail {
            return Err(BackendError::Transport {
                attempts: 1,
                message: "scripted transport failure".to_string(),
            });
        }
        if runtime.failures_served.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |served| {
            (served < entry.fail_times).then_some(served + 1)
        }).is_ok() {
            return Err(BackendError::Transport {
                attempts: 1,
                message: "scripted transient failure".to_string(),
            });
        }
        let text = entry
            .responses
            .first()
            .ok_or_else(|| BackendError::Script("matched entry has no responses".to_string()))?
            .clone();
        let token_logprobs = if request.want_logprobs {
            if !self.logprobs_supported {
                return Err(BackendError::Capability {
                    backend: self.name().to_string(),
                    message: "logprobs are not supported by this backend".to_string(),
                });
            }
            Some(entry.token_logprobs.clone().ok_or_else(|| BackendError::Capability {
                backend: self.name().to_string(),
                message: "matched entry carries no token logprobs".to_string(),
            })?)
        } else {
            None
        };
        Ok(CompletionResult {
            text,
            token_logprobs,
            finish_reason: FinishReason::Stop,
        })
    }
}

impl Backend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn supports_logprobs(&self) -> bool {
        self.logprobs_supported
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        validate_request(request)?;
        match &self.behavior {
            Behavior::Handler(f) => f(request),
            Behavior::Scripted(_) => {
                let prompt = request.prompt_text();
                let runtime = self.find_entry(&prompt)?;
                self.serve(runtime, request)
            }
        }
    }

    fn sample_n(&self, request: &CompletionRequest, n: usize) -> Result<Vec<CompletionResult>, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        validate_sampling(request, n)?;
        match &self.behavior {
            Behavior::Handler(f) => {
                let mut successes = Vec::with_capacity(n);
                for _ in 0..n {
                    match f(request) {
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
            Behavior::Scripted(_) => {
                let prompt = request.prompt_text();
                let runtime = self.find_entry(&prompt)?;
                let entry = &runtime.entry;
                if entry.fail {
                    return Err(BackendError::Sample {
                        requested: n,
                        successes: Vec::new(),
                        cause: Box::new(BackendError::Transport {
                            attempts: 1,
                            message: "scripted transport failure".to_string(),
                        }),
                    });
                }
                let successes: Vec<CompletionResult> = entry
                    .responses
                    .iter()
                    .take(n)
                    .map(|text| CompletionResult::text_only(text.clone()))
                    .collect();
                if successes.len() < n {
                    return Err(BackendError::Sample {
                        requested: n,
                        successes,
                        cause: Box::new(BackendError::Transport {
                            attempts: 1,
                            message: format!(
                                "script provides only {} of {n} samples",
                                entry.responses.len()
                            ),
                        }),
                    });
                }
                Ok(successes)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Message, TokenAlternative};

    fn script(entries: Vec<ScriptEntry>) -> MockBackend {
        MockBackend::scripted(MockScript { logprobs_supported: true, entries })
    }

    fn entry(matcher: Matcher, responses: &[&str]) -> ScriptEntry {
        ScriptEntry {
            matcher,
            responses: responses.iter().map(|s| s.to_string()).collect(),
            token_logprobs: None,
            fail_times: 0,
            fail: false,
        }
    }

    fn user_req(prompt: &str) -> CompletionRequest {
        CompletionRequest::new("m", vec![Message::user(prompt)])
    }

    #[test]
    fn first_matching_entry_wins() {
        let mock = script(vec![
            entry(Matcher::Contains("STATEMENT".into()), &["0.85"]),
            entry(Matcher::Contains("capital".into()), &["fallback"]),
        ]);
        let got = mock.complete(&user_req("STATEMENT about the capital")).unwrap();
        assert_eq!(got.text, "0.85");
        assert_eq!(mock.calls(), 1);
    }

    #[test]
    fn equals_matcher_requires_the_whole_prompt() {
        let mock = script(vec![entry(Matcher::Equals("Who won?".into()), &["Alice."])]);
        assert_eq!(mock.complete(&user_req("Who won?")).unwrap().text, "Alice.");
        assert!(matches!(
            mock.complete(&user_req("Who won? Tell me.")),
            Err(BackendError::ScriptMiss { .. })
        ));
    }

    #[test]
    fn contains_all_needs_every_part() {
        let mock = script(vec![entry(
            Matcher::ContainsAll(vec!["STATEMENT:".into(), "Paris".into()]),
            &["0.9"],
        )]);
        assert!(mock.complete(&user_req("STATEMENT:\nParis is old.")).is_ok());
        assert!(mock.complete(&user_req("STATEMENT:\nRome is old.")).is_err());
    }

    #[test]
    fn identical_requests_get_identical_responses() {
        let mock = script(vec![entry(Matcher::Contains("x".into()), &["a", "b"])]);
        let r1 = mock.complete(&user_req("x")).unwrap();
        let r2 = mock.complete(&user_req("x")).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.text, "a");
    }

    #[test]
    fn logprobs_served_only_when_requested() {
        let mut e = entry(Matcher::Contains("true?".into()), &["True"]);
        e.token_logprobs = Some(vec![TokenLogprob {
            token: "True".into(),
            logprob: -0.1,
            alternatives: vec![
                TokenAlternative { token: "True".into(), logprob: -0.1 },
                TokenAlternative { token: "False".into(), logprob: -2.4 },
            ],
        }]);
        let mock = script(vec![e]);
        let plain = mock.complete(&user_req("true?")).unwrap();
        assert!(plain.token_logprobs.is_none());
        let with = mock.complete(&user_req("true?").with_logprobs(4)).unwrap();
        assert_eq!(with.token_logprobs.unwrap().len(), 1);
    }

    #[test]
    fn logprob_requests_fail_when_unsupported() {
        let mock = MockBackend::scripted(MockScript {
            logprobs_supported: false,
            entries: vec![entry(Matcher::Contains("q".into()), &["True"])],
        });
        assert!(!mock.supports_logprobs());
        assert!(matches!(
            mock.complete(&user_req("q").with_logprobs(4)),
            Err(BackendError::Capability { .. })
        ));
    }

    #[test]
    fn fail_times_serves_errors_then_recovers() {
        let mut e = entry(Matcher::Contains("q".into()), &["ok"]);
        e.fail_times = 2;
        let mock = script(vec![e]);
        assert!(mock.complete(&user_req("q")).is_err());
        assert!(mock.complete(&user_req("q")).is_err());
        assert_eq!(mock.complete(&user_req("q")).unwrap().text, "ok");
    }

    #[test]
    fn sample_n_serves_scripted_responses_in_order() {
        let mock = script(vec![entry(Matcher::Contains("q".into()), &["a", "b", "c", "d", "e"])]);
        let req = user_req("q").with_temperature(1.0);
        let samples = mock.sample_n(&req, 5).unwrap();
        let texts: Vec<_> = samples.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(texts, ["a", "b", "c", "d", "e"]);
    }

    #[test]
    fn sample_n_partial_failure_carries_successes() {
        let mock = script(vec![entry(Matcher::Contains("q".into()), &["a", "b"])]);
        let req = user_req("q").with_temperature(1.0);
        match mock.sample_n(&req, 3) {
            Err(BackendError::Sample { requested, successes, .. }) => {
                assert_eq!(requested, 3);
                assert_eq!(successes.len(), 2);
                assert_eq!(successes[0].text, "a");
            }
            other => panic!("expected sample failure, got {other:?}"),
        }
    }

    #[test]
    fn script_round_trips_through_json() {
        let text = r#"{
            "logprobs_supported": true,
            "entries": [
                {"match": {"equals": "Who?"}, "responses": ["Alice."]},
                {"match": {"contains_all": ["a", "b"]}, "responses": ["x"], "fail_times": 1}
            ]
        }"#;
        let script: MockScript = serde_json::from_str(text).unwrap();
        assert_eq!(script.entries.len(), 2);
        let mock = MockBackend::scripted(script);
        assert_eq!(mock.complete(&user_req("Who?")).unwrap().text, "Alice.");
    }
}
