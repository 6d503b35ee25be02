//! Fact and factor extraction: prompt construction, tolerant output parsers,
//! and the shared retry policy — one automatic reformat request, then a hard
//! error that carries the unparseable output.

use regex::Regex;
use thiserror::Error;

use crate::backend::{Backend, BackendError, CompletionRequest, Message};
use crate::domain::{DomainError, FactorSet, UnitScore};
use crate::prompts::{PromptError, TemplateName, TemplateSet};

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("response text is empty")]
    EmptyResponse,
    #[error("fact text is empty")]
    EmptyFact,
    #[error("no fact list in backend output after one reformat attempt: `{raw_head}`")]
    UnparseableFacts { raw_head: String },
    #[error("no <[...]> factor frame in backend output after one reformat attempt: `{raw_head}`")]
    UnparseableFactors { raw_head: String },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Error)]
pub enum ScoreParseError {
    #[error("no numeral in `{0}`")]
    NoNumeral(String),
    #[error("first numeral {value} in `{raw_head}` is outside [0, 1]")]
    OutOfRange { value: f64, raw_head: String },
}

const FACT_REMINDER: &str = "Reformat your previous answer: write one fact per line, each line \
starting with \"- \", and nothing else. If there are no facts, reply NONE.";
const FACTOR_REMINDER: &str = "Reformat your previous answer: return only the key factors, using \
the exact format <[factor1, factor2, ...]>.";
/// Reformat reminder for any prompt that expects a bare unit-interval score.
pub(crate) const SCORE_REMINDER: &str = "Reply with only a single value between 0 and 1, written \
with two decimal places.";

/// Truncates raw model output for inclusion in error messages.
pub(crate) fn head(text: &str) -> String {
    let trimmed = text.trim();
    if trimmed.chars().count() <= 120 {
        trimmed.to_string()
    } else {
        trimmed.chars().take(120).collect()
    }
}

/// Runs a completion and parses it; on a parse failure, sends one follow-up
/// turn containing the model's answer and a format reminder, then parses
/// that. Returns `Ok(Err(last_raw_output))` when both attempts fail to
/// parse, so callers can build their own error.
pub(crate) fn complete_and_parse<T, E>(
    backend: &dyn Backend,
    request: &CompletionRequest,
    reminder: &str,
    parse: impl Fn(&str) -> Result<T, E>,
) -> Result<Result<T, String>, BackendError> {
    let first = backend.complete(request)?;
    if let Ok(value) = parse(&first.text) {
        return Ok(Ok(value));
    }
    let mut retry = request.clone();
    retry.messages.push(Message::assistant(first.text));
    retry.messages.push(Message::user(reminder));
    let second = backend.complete(&retry)?;
    Ok(match parse(&second.text) {
        Ok(value) => Ok(value),
        Err(_) => Err(second.text),
    })
}

/// Asks the backend to decompose a response into atomic facts and parses the
/// resulting list. Facts come back in response order, undeduplicated; an
/// explicit `NONE` answer yields an empty list.
pub fn extract_facts(
    backend: &dyn Backend,
    templates: &TemplateSet,
    model_id: &str,
    query: &str,
    response_text: &str,
) -> Result<Vec<String>, ExtractionError> {
    if response_text.trim().is_empty() {
        return Err(ExtractionError::EmptyResponse);
    }
    let prompt = templates.render(
        TemplateName::FactExtraction,
        &[("question", query), ("response", response_text)],
    )?;
    let request = CompletionRequest::new(model_id, vec![Message::user(prompt)]);
    match complete_and_parse(backend, &request, FACT_REMINDER, parse_fact_list)? {
        Ok(facts) => Ok(facts),
        Err(raw) => Err(ExtractionError::UnparseableFacts { raw_head: head(&raw) }),
    }
}

/// Parses a fact list: one fact per line behind a `-`, `*`, or `1.`-style
/// marker. A bare `NONE` (or empty output) is an explicitly empty list.
pub fn parse_fact_list(text: &str) -> Result<Vec<String>, ()> {
    let marker = Regex::new(r"^\s*(?:[-*]|\d+[.)])\s+(.+)$").expect("marker pattern compiles");
    let facts: Vec<String> = text
        .lines()
        .filter_map(|line| marker.captures(line))
        .map(|caps| caps[1].trim().to_string())
        .filter(|fact| !fact.is_empty())
        .collect();
    if !facts.is_empty() {
        return Ok(facts);
    }
    let trimmed = text.trim().trim_matches(|c: char| c == '"' || c == '.' || c == '`');
    if trimmed.is_empty() || trimmed.eq_ignore_ascii_case("none") {
        return Ok(Vec::new());
    }
    Err(())
}

/// Asks the backend for the key factors of one fact and parses the
/// `<[factor1, factor2, ...]>` frame into a deduplicated factor set.
pub fn extract_factors(
    backend: &dyn Backend,
    templates: &TemplateSet,
    model_id: &str,
    fact_text: &str,
) -> Result<FactorSet, ExtractionError> {
    if fact_text.trim().is_empty() {
        return Err(ExtractionError::EmptyFact);
    }
    let prompt = templates.render(TemplateName::FactorExtraction, &[("sentence", fact_text)])?;
    let request = CompletionRequest::new(model_id, vec![Message::user(prompt)]);
    match complete_and_parse(backend, &request, FACTOR_REMINDER, parse_factor_frame)? {
        Ok(set) => Ok(set),
        Err(raw) => Err(ExtractionError::UnparseableFactors { raw_head: head(&raw) }),
    }
}

/// Parses the first `<[...]>` frame in `text` into a factor set. Fails when
/// no frame exists or the frame holds no usable factor.
pub fn parse_factor_frame(text: &str) -> Result<FactorSet, ()> {
    let frame = Regex::new(r"(?s)<\[(.*?)\]>").expect("frame pattern compiles");
    let inner = frame.captures(text).ok_or(())?.get(1).expect("capture").as_str();
    FactorSet::new(inner.split(',').map(str::to_string)).map_err(|_: DomainError| ())
}

/// Extracts the first decimal numeral from free-form text and requires it to
/// lie in the unit interval. Out-of-range numerals are rejected, never
/// clamped.
pub fn parse_unit_score(text: &str) -> Result<UnitScore, ScoreParseError> {
    let numeral = Regex::new(r"-?(?:\d+(?:\.\d+)?|\.\d+)").expect("numeral pattern compiles");
    let matched = numeral
        .find(text)
        .ok_or_else(|| ScoreParseError::NoNumeral(head(text)))?;
    let value: f64 = matched.as_str().parse().expect("matched numeral parses as f64");
    UnitScore::new(value).map_err(|_| ScoreParseError::OutOfRange { value, raw_head: head(text) })
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use super::*;
    use crate::backend::mock::{Matcher, MockScript, ScriptEntry};
    use crate::backend::{CompletionResult, MockBackend};

    fn mock_replying(needle: &str, reply: &str) -> MockBackend {
        MockBackend::scripted(MockScript {
            logprobs_supported: true,
            entries: vec![ScriptEntry {
                matcher: Matcher::Contains(needle.to_string()),
                responses: vec![reply.to_string()],
                token_logprobs: None,
                fail_times: 0,
                fail: false,
            }],
        })
    }

    #[test]
    fn decomposes_a_response_into_ordered_facts() {
        let mock = mock_replying(
            "RESPONSE:",
            "- Paris is the capital of France.\n- Paris hosted the 1900 Olympics.",
        );
        let templates = TemplateSet::builtin();
        let facts = extract_facts(
            &mock,
            &templates,
            "m",
            "Tell me about Paris.",
            "Paris is the capital of France. It hosted the 1900 Olympics.",
        )
        .unwrap();
        assert_eq!(
            facts,
            ["Paris is the capital of France.", "Paris hosted the 1900 Olympics."]
        );
    }

    #[test]
    fn fact_list_accepts_star_and_numbered_markers() {
        let parsed = parse_fact_list("* first\n2. second\n3) third\nnoise line").unwrap();
        assert_eq!(parsed, ["first", "second", "third"]);
        // Duplicates are kept: repetition is signal for downstream stages.
        let dup = parse_fact_list("- same\n- same").unwrap();
        assert_eq!(dup, ["same", "same"]);
    }

    #[test]
    fn explicit_none_is_an_empty_fact_list() {
        assert_eq!(parse_fact_list("NONE").unwrap(), Vec::<String>::new());
        assert_eq!(parse_fact_list("none.").unwrap(), Vec::<String>::new());
        assert!(parse_fact_list("The response discusses weather.").is_err());
    }

    #[test]
    fn empty_response_is_rejected_before_any_backend_call() {
        let mock = mock_replying("x", "y");
        let templates = TemplateSet::builtin();
        let err = extract_facts(&mock, &templates, "m", "Q", "   ").unwrap_err();
        assert!(matches!(err, ExtractionError::EmptyResponse));
        assert_eq!(mock.calls(), 0);
    }

    #[test]
    fn prose_output_errors_after_one_reformat_attempt() {
        let mock = mock_replying("RESPONSE:", "I cannot list facts, sorry.");
        let templates = TemplateSet::builtin();
        let err = extract_facts(&mock, &templates, "m", "Q", "Some response.").unwrap_err();
        match err {
            ExtractionError::UnparseableFacts { raw_head } => {
                assert!(raw_head.contains("cannot list facts"))
            }
            other => panic!("unexpected error: {other}"),
        }
        assert_eq!(mock.calls(), 2, "exactly one reformat attempt");
    }

    #[test]
    fn reformat_attempt_can_rescue_a_run() {
        let calls = AtomicUsize::new(0);
        let mock = MockBackend::from_fn(move |_req| {
            let n = calls.fetch_add(1, Ordering::SeqCst);
            Ok(CompletionResult::text_only(if n == 0 {
                "Here are some facts in prose."
            } else {
                "- A rescued fact."
            }))
        });
        let templates = TemplateSet::builtin();
        let facts = extract_facts(&mock, &templates, "m", "Q", "R").unwrap();
        assert_eq!(facts, ["A rescued fact."]);
        assert_eq!(mock.calls(), 2);
    }

    #[test]
    fn factor_frame_parses_and_dedups() {
        let set = parse_factor_frame("<[Paris, 1900 Olympics]>").unwrap();
        assert_eq!(set.factors(), ["Paris", "1900 Olympics"]);
        let deduped = parse_factor_frame("Sure: <[Paris, paris, PARIS]>").unwrap();
        assert_eq!(deduped.factors(), ["Paris"]);
    }

    #[test]
    fn factor_frame_rejects_missing_or_empty_frames() {
        assert!(parse_factor_frame("no frame here").is_err());
        assert!(parse_factor_frame("<[]>").is_err());
        assert!(parse_factor_frame("<[ , ,, ]>").is_err());
    }

    #[test]
    fn extract_factors_round_trip_through_mock() {
        let mock = mock_replying("SENTENCE:", "<[Paris, 1900 Olympics]>");
        let templates = TemplateSet::builtin();
        let set = extract_factors(&mock, &templates, "m", "Paris hosted the 1900 Olympics.").unwrap();
        assert_eq!(set.len(), 2);
    }

    #[test]
    fn unit_score_parses_first_numeral_only() {
        assert_eq!(parse_unit_score("Confidence: 0.85").unwrap().value(), 0.85);
        assert_eq!(parse_unit_score("0.3 or maybe 0.9").unwrap().value(), 0.3);
        assert_eq!(parse_unit_score("1.00").unwrap().value(), 1.0);
        assert_eq!(parse_unit_score(".5 seems right").unwrap().value(), 0.5);
    }

    #[test]
    fn unit_score_rejects_out_of_range_instead_of_clamping() {
        match parse_unit_score("about 1.5 out of 2").unwrap_err() {
            ScoreParseError::OutOfRange { value, .. } => assert_eq!(value, 1.5),
            other => panic!("unexpected error: {other}"),
        }
        assert!(matches!(
            parse_unit_score("no idea"),
            Err(ScoreParseError::NoNumeral(_))
        ));
        assert!(parse_unit_score("-0.25").is_err());
        assert!(parse_unit_score("85%").is_err());
    }
}
