//! Per-fact confidence estimators: verbalized scores, a two-way softmax over
//! True/False first-token logprobs, and sampling-based consistency, plus the
//! verbalized response-level estimator.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, CompletionRequest, Message};
use crate::domain::{ResponseRecord, UnitScore};
use crate::extraction::{complete_and_parse, head, parse_unit_score, SCORE_REMINDER};
use crate::prompts::{PromptError, TemplateName, TemplateSet};

/// Scoring guide spliced into the confidence prompts' `{criterion}` slot.
pub const DEFAULT_CRITERION: &str = "   1.00 means certainly accurate, 0.00 means certainly \
wrong, and 0.50 means you genuinely cannot tell.";

pub const DEFAULT_CONSISTENCY_SAMPLES: usize = 5;
pub const DEFAULT_CONSISTENCY_TEMPERATURE: f64 = 1.0;
const TRUTH_PROBE_ALTERNATIVES: u8 = 8;

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("no unit-interval score in backend output after one reformat attempt: `{raw_head}`")]
    UnparseableScore { raw_head: String },
    #[error("first generated token offers neither a True nor a False alternative")]
    MissingTruthTokens,
    #[error("probe completion carries no token logprobs")]
    EmptyLogprobs,
    #[error("no parsable Yes/No verdict for a sampled regeneration: `{raw_head}`")]
    UnparseableSupport { raw_head: String },
    #[error("every fact estimate failed; first failure: {first_failure}")]
    AllFactsFailed { first_failure: String },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Which confidence estimator a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMethod {
    /// Ask the model to state a numeric confidence.
    Verbalization,
    /// Two-way softmax over the best True/False logprobs of a probe's first
    /// generated token. Requires logprob support.
    IsTrueLogit,
    /// Fraction of sampled regenerations that support the fact.
    Consistency,
}

impl std::str::FromStr for EstimatorMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "verbalization" => Ok(Self::Verbalization),
            "is_true_logit" => Ok(Self::IsTrueLogit),
            "consistency" => Ok(Self::Consistency),
            other => Err(format!(
                "unknown estimator `{other}` (expected verbalization, is_true_logit, or consistency)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub method: EstimatorMethod,
    /// Regenerations drawn per fact by the consistency estimator.
    pub consistency_samples: usize,
    /// Sampling temperature for those regenerations.
    pub consistency_temperature: f64,
    /// Seed threaded into sampled calls for record/replay fixtures.
    pub seed: Option<u64>,
}

impl EstimatorConfig {
    pub fn new(method: EstimatorMethod) -> Self {
        Self {
            method,
            consistency_samples: DEFAULT_CONSISTENCY_SAMPLES,
            consistency_temperature: DEFAULT_CONSISTENCY_TEMPERATURE,
            seed: None,
        }
    }
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self::new(EstimatorMethod::Verbalization)
    }
}

/// Backends an estimation run needs: the model being measured, and a tool
/// model for auxiliary judgments (support checks).
pub struct EstimatorBackends<'a> {
    /// The model whose calibration is being measured; all confidence signals
    /// come from it.
    pub subject: &'a dyn Backend,
    /// Auxiliary model for support checks in the consistency estimator.
    pub tool: &'a dyn Backend,
    /// Model id sent with subject requests.
    pub subject_model: &'a str,
    /// Model id sent with tool requests.
    pub tool_model: &'a str,
}

/// Estimates the subject model's confidence in one fact, using the method in
/// `config`.
pub fn estimate_fact_confidence(
    config: &EstimatorConfig,
    backends: &EstimatorBackends<'_>,
    templates: &TemplateSet,
    query: &str,
    response_text: &str,
    fact_text: &str,
) -> Result<UnitScore, EstimateError> {
    match config.method {
        EstimatorMethod::Verbalization => {
            verbalized_fact_confidence(backends, templates, query, response_text, fact_text)
        }
        EstimatorMethod::IsTrueLogit => {
            is_true_logit(backends, templates, query, response_text, fact_text)
        }
        EstimatorMethod::Consistency => {
            consistency(config, backends, templates, query, fact_text)
        }
    }
}

fn verbalized_fact_confidence(
    backends: &EstimatorBackends<'_>,
    templates: &TemplateSet,
    query: &str,
    response_text: &str,
    fact_text: &str,
) -> Result<UnitScore, EstimateError> {
    let prompt = templates.render(
        TemplateName::FactConfidence,
        &[
            ("criterion", DEFAULT_CRITERION),
            ("question", query),
            ("response", response_text),
            ("statement", fact_text),
        ],
    )?;
    let request = CompletionRequest::new(backends.subject_model, vec![Message::user(prompt)])
        .with_max_tokens(16);
    match complete_and_parse(backends.subject, &request, SCORE_REMINDER, parse_unit_score)? {
        Ok(score) => Ok(score),
        Err(raw) => Err(EstimateError::UnparseableScore { raw_head: head(&raw) }),
    }
}

/// Verbalized confidence in the whole response; the response-level analogue
/// of the fact estimators, used regardless of the per-fact method.
pub fn estimate_response_confidence(
    backends: &EstimatorBackends<'_>,
    templates: &TemplateSet,
    query: &str,
    response_text: &str,
) -> Result<UnitScore, EstimateError> {
    let prompt = templates.render(
        TemplateName::ResponseConfidence,
        &[
            ("criterion", DEFAULT_CRITERION),
            ("question", query),
            ("response", response_text),
        ],
    )?;
    let request = CompletionRequest::new(backends.subject_model, vec![Message::user(prompt)])
        .with_max_tokens(16);
    match complete_and_parse(backends.subject, &request, SCORE_REMINDER, parse_unit_score)? {
        Ok(score) => Ok(score),
        Err(raw) => Err(EstimateError::UnparseableScore { raw_head: head(&raw) }),
    }
}

fn is_true_logit(
    backends: &EstimatorBackends<'_>,
    templates: &TemplateSet,
    query: &str,
    response_text: &str,
    fact_text: &str,
) -> Result<UnitScore, EstimateError> {
    let prompt = templates.render(
        TemplateName::TruthProbe,
        &[("question", query), ("response", response_text), ("statement", fact_text)],
    )?;
    let request = CompletionRequest::new(backends.subject_model, vec![Message::user(prompt)])
        .with_max_tokens(4)
        .with_logprobs(TRUTH_PROBE_ALTERNATIVES);
    let result = backends.subject.complete(&request)?;
    let tokens = result.token_logprobs.ok_or(EstimateError::EmptyLogprobs)?;
    let first = tokens.first().ok_or(EstimateError::EmptyLogprobs)?;

    // Best-scoring casing of each label among the first token and its
    // alternatives; a missing side contributes probability zero.
    let mut best_true = f64::NEG_INFINITY;
    let mut best_false = f64::NEG_INFINITY;
    let candidates = std::iter::once((first.token.as_str(), first.logprob))
        .chain(first.alternatives.iter().map(|alt| (alt.token.as_str(), alt.logprob)));
    for (token, logprob) in candidates {
        match token.trim().to_ascii_lowercase().as_str() {
            "true" => best_true = best_true.max(logprob),
            "false" => best_false = best_false.max(logprob),
            _ => {}
        }
    }
    if best_true == f64::NEG_INFINITY && best_false == f64::NEG_INFINITY {
        return Err(EstimateError::MissingTruthTokens);
    }
    Ok(two_way_softmax(best_true, best_false))
}

/// Probability of the first label under a softmax restricted to two
/// logprobs. Written in the numerically stable single-exponential form;
/// equal inputs give exactly 0.5.
fn two_way_softmax(logprob_true: f64, logprob_false: f64) -> UnitScore {
    let p = if logprob_true == f64::NEG_INFINITY {
        0.0
    } else if logprob_false == f64::NEG_INFINITY {
        1.0
    } else {
        1.0 / (1.0 + (logprob_false - logprob_true).exp())
    };
    UnitScore::new(p).expect("softmax output lies in [0, 1]")
}

fn consistency(
    config: &EstimatorConfig,
    backends: &EstimatorBackends<'_>,
    templates: &TemplateSet,
    query: &str,
    fact_text: &str,
) -> Result<UnitScore, EstimateError> {
    let regen = CompletionRequest::new(backends.subject_model, vec![Message::user(query)])
        .with_temperature(config.consistency_temperature)
        .with_seed(config.seed);
    let samples = backends.subject.sample_n(&regen, config.consistency_samples)?;

    let mut supporting = 0usize;
    for sample in &samples {
        let prompt = templates.render(
            TemplateName::SupportCheck,
            &[("passage", sample.text.as_str()), ("statement", fact_text)],
        )?;
        let request = CompletionRequest::new(backends.tool_model, vec![Message::user(prompt)])
            .with_max_tokens(4);
        let verdict =
            complete_and_parse(backends.tool, &request, "Answer with exactly one word: Yes or No.", parse_yes_no)?;
        match verdict {
            Ok(true) => supporting += 1,
            Ok(false) => {}
            Err(raw) => return Err(EstimateError::UnparseableSupport { raw_head: head(&raw) }),
        }
    }
    Ok(UnitScore::new(supporting as f64 / samples.len() as f64)
        .expect("supporting fraction lies in [0, 1]"))
}

fn parse_yes_no(text: &str) -> Result<bool, ()> {
    let first_word = text
        .split_whitespace()
        .next()
        .map(|w| w.trim_matches(|c: char| !c.is_ascii_alphabetic()).to_ascii_lowercase())
        .unwrap_or_default();
    match first_word.as_str() {
        "yes" => Ok(true),
        "no" => Ok(false),
        _ => Err(()),
    }
}

/// Confidence scores for every fact of one response, aligned by fact index.
/// Failed facts stay `None` with their failure recorded alongside.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfidenceVector {
    pub scores: Vec<Option<UnitScore>>,
    pub failures: Vec<FactFailure>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactFailure {
    pub fact_index: usize,
    pub message: String,
}

impl ConfidenceVector {
    /// A response with no facts — nothing to estimate.
    pub fn is_degenerate(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Estimates confidence for every fact in the response. Per-fact failures
/// are recorded and leave a hole; only a response where *every* fact fails
/// is an error.
pub fn estimate_all(
    config: &EstimatorConfig,
    backends: &EstimatorBackends<'_>,
    templates: &TemplateSet,
    query: &str,
    response: &ResponseRecord,
) -> Result<ConfidenceVector, EstimateError> {
    let mut scores = Vec::with_capacity(response.facts.len());
    let mut failures = Vec::new();
    for fact in &response.facts {
        match estimate_fact_confidence(config, backends, templates, query, &response.text, &fact.text) {
            Ok(score) => scores.push(Some(score)),
            Err(err) => {
                failures.push(FactFailure { fact_index: fact.index, message: err.to_string() });
                scores.push(None);
            }
        }
    }
    if !scores.is_empty() && scores.iter().all(Option::is_none) {
        return Err(EstimateError::AllFactsFailed {
            first_failure: failures.first().map(|f| f.message.clone()).unwrap_or_default(),
        });
    }
    Ok(ConfidenceVector { scores, failures })
}
