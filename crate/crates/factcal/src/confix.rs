//! Confidence-guided self-correction: partition facts around their mean
//! confidence, then repair each low-confidence fact by extracting its key
//! factors, asking the subject model to correct them against the
//! high-confidence facts, re-estimating confidence, and accepting only
//! strict improvements — all bounded by a fixed iteration budget and logged
//! in a per-response trace.

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;
use thiserror::Error;

use crate::backend::{Backend, BackendError, CompletionRequest, Message};
use crate::domain::{DomainError, FactUnit, FactorSet, Partition, QueryRecord, ResponseRecord, Revision};
use crate::estimators::{estimate_fact_confidence, EstimatorBackends, EstimatorConfig};
use crate::extraction::{complete_and_parse, extract_factors, head};
use crate::prompts::{PromptError, TemplateName, TemplateSet};

/// Default bound on correction attempts per low-confidence fact.
pub const DEFAULT_MAX_ITERATIONS: usize = 3;

const CORRECTION_REMINDER: &str = "Reply with one correction per line in the exact format \
<old factor -> new factor>, changing only the listed factors, or reply with the single word \
NoError. Do not change any text outside the factors.";

#[derive(Debug, Error)]
pub enum ConfixError {
    #[error("max_iterations must be at least 1")]
    ZeroIterations,
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Settings for one self-correction run.
#[derive(Debug, Clone)]
pub struct ConfixConfig {
    /// Correction attempts allowed per low-confidence fact (≥ 1).
    pub max_iterations: usize,
    /// Append each reference fact's confidence score to the correction
    /// prompt. Off by default: the prompt then carries reference texts only.
    pub include_reference_scores: bool,
    /// How proposed revisions are re-scored.
    pub estimator: EstimatorConfig,
}

impl Default for ConfixConfig {
    fn default() -> Self {
        Self {
            max_iterations: DEFAULT_MAX_ITERATIONS,
            include_reference_scores: false,
            estimator: EstimatorConfig::default(),
        }
    }
}

/// Splits a fact confidence vector into high and low groups around its
/// arithmetic mean (high means confidence ≥ mean).
pub fn partition_facts(confidences: &[f64]) -> Result<Partition, ConfixError> {
    Ok(Partition::from_confidences(confidences)?)
}

/// What one correction call produced.
#[derive(Debug, Clone, PartialEq)]
pub enum CorrectionAttempt {
    /// The model saw nothing to fix; the fact's loop terminates.
    NoError,
    /// A revision that passed the factor-scope check, ready to re-estimate.
    Revised(String),
    /// Output unusable after one reformat re-prompt: either it never parsed,
    /// no correction pair applied, or the revision changed text outside the
    /// listed factors. Consumes the iteration.
    Rejected { proposed: Option<String>, note: String },
}

enum RawCorrection {
    NoError,
    Pairs(Vec<(String, String)>),
    Rewrite(String),
}

fn pair_regex() -> &'static Regex {
    static PAIR: OnceLock<Regex> = OnceLock::new();
    PAIR.get_or_init(|| Regex::new(r"<([^<>]*?)->([^<>]*?)>").expect("valid pair regex"))
}

fn is_no_error_marker(text: &str) -> bool {
    let normalize = |s: &str| {
        s.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_ascii_lowercase()
    };
    normalize(text) == "noerror" || text.lines().any(|line| normalize(line) == "noerror")
}

fn parse_correction_output(text: &str) -> Result<RawCorrection, ()> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(());
    }
    if is_no_error_marker(trimmed) {
        return Ok(RawCorrection::NoError);
    }
    let pairs: Vec<(String, String)> = pair_regex()
        .captures_iter(trimmed)
        .filter_map(|captures| {
            let old = captures[1].trim().to_string();
            let new = captures[2].trim().to_string();
            (!old.is_empty() && !new.is_empty()).then_some((old, new))
        })
        .collect();
    if !pairs.is_empty() {
        return Ok(RawCorrection::Pairs(pairs));
    }
    let rewrite = trimmed.trim_matches('"').trim();
    if rewrite.is_empty() {
        Err(())
    } else {
        Ok(RawCorrection::Rewrite(rewrite.to_string()))
    }
}

/// Replaces, for each pair, the first case-insensitive occurrence of the old
/// factor. `None` when no pair matched anything.
fn apply_pairs(original: &str, pairs: &[(String, String)]) -> Option<String> {
    let mut revised = original.to_string();
    let mut applied = false;
    for (old, new) in pairs {
        let lowered = revised.to_lowercase();
        if let Some(position) = lowered.find(&old.to_lowercase()) {
            // `position` is a byte offset in `lowered`; it is only safe to
            // splice when it is also a boundary of `revised` itself, which
            // holds whenever lowercasing did not change byte lengths.
            if lowered.len() == revised.len() && revised.is_char_boundary(position) {
                revised.replace_range(position..position + old.len(), new);
                applied = true;
            } else if let Some(position) = revised.find(old.as_str()) {
                revised.replace_range(position..position + old.len(), new);
                applied = true;
            }
        }
    }
    applied.then_some(revised)
}

fn word_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|chunk| !chunk.is_empty())
        .map(|chunk| chunk.to_lowercase())
        .collect()
}

fn find_subslice(haystack: &[String], needle: &[String]) -> Option<usize> {
    if needle.is_empty() {
        return Some(0);
    }
    haystack.windows(needle.len()).position(|window| window == needle)
}

/// Checks that a revision only touches the listed factor spans: every
/// maximal run of original tokens outside a factor occurrence must survive
/// contiguously and in order in the revision (case-insensitive, punctuation
/// and whitespace ignored). Runs anchored at the start or end of the
/// original must stay anchored.
pub fn is_within_factor_scope(original: &str, revised: &str, factors: &FactorSet) -> bool {
    let original_tokens = word_tokens(original);
    if original_tokens.is_empty() {
        return true;
    }
    let mut covered = vec![false; original_tokens.len()];
    for factor in factors.factors() {
        let factor_tokens = word_tokens(factor);
        if factor_tokens.is_empty() {
            continue;
        }
        let mut start = 0;
        while start + factor_tokens.len() <= original_tokens.len() {
            if original_tokens[start..start + factor_tokens.len()] == factor_tokens[..] {
                covered[start..start + factor_tokens.len()].fill(true);
            }
            start += 1;
        }
    }

    let mut segments: Vec<(usize, &[String])> = Vec::new();
    let mut run_start = None;
    for (index, &flag) in covered.iter().enumerate() {
        match (flag, run_start) {
            (false, None) => run_start = Some(index),
            (true, Some(start)) => {
                segments.push((start, &original_tokens[start..index]));
                run_start = None;
            }
            _ => {}
        }
    }
    if let Some(start) = run_start {
        segments.push((start, &original_tokens[start..]));
    }

    let revised_tokens = word_tokens(revised);
    let mut cursor = 0;
    for (start, segment) in &segments {
        match find_subslice(&revised_tokens[cursor..], segment) {
            Some(offset) => {
                // A segment that opens the original fact must open the
                // revision too; insertions before it are out of scope.
                if *start == 0 && cursor + offset != 0 {
                    return false;
                }
                cursor += offset + segment.len();
            }
            None => return false,
        }
    }
    if let Some((start, segment)) = segments.last() {
        // Likewise a segment that closes the original must close the
        // revision.
        if start + segment.len() == original_tokens.len() && cursor != revised_tokens.len() {
            return false;
        }
    }
    true
}

/// Asks the correction model to fix a fact's factors against reference
/// knowledge. The reference block is the rendered list of high-confidence
/// facts. Unusable output costs the attempt but is not an error; transport
/// and template problems are.
pub fn correct_fact(
    backend: &dyn Backend,
    templates: &TemplateSet,
    model_id: &str,
    fact_text: &str,
    factors: &FactorSet,
    reference_block: &str,
) -> Result<CorrectionAttempt, ConfixError> {
    let factor_list = factors.factors().join(", ");
    let prompt = templates.render(
        TemplateName::FactCorrection,
        &[
            ("sentence", fact_text),
            ("factors", factor_list.as_str()),
            ("reference", reference_block),
        ],
    )?;
    let request = CompletionRequest::new(model_id.to_string(), vec![Message::user(prompt)]);
    let parsed = complete_and_parse(backend, &request, CORRECTION_REMINDER, |text| {
        match parse_correction_output(text) {
            Ok(RawCorrection::NoError) => Ok(CorrectionAttempt::NoError),
            Ok(RawCorrection::Pairs(pairs)) => {
                let applied = apply_pairs(fact_text, &pairs).ok_or(())?;
                if is_within_factor_scope(fact_text, &applied, factors) {
                    Ok(CorrectionAttempt::Revised(applied))
                } else {
                    Err(())
                }
            }
            Ok(RawCorrection::Rewrite(rewrite)) => {
                if is_within_factor_scope(fact_text, &rewrite, factors) {
                    Ok(CorrectionAttempt::Revised(rewrite))
                } else {
                    Err(())
                }
            }
            Err(()) => Err(()),
        }
    })?;
    Ok(match parsed {
        Ok(attempt) => attempt,
        Err(raw) => classify_rejection(&raw, fact_text),
    })
}

/// Explains why a twice-failed correction output was rejected. Reaching
/// here with output that parses means the factor-scope check (or pair
/// application) failed, since in-scope revisions are accepted upstream.
fn classify_rejection(raw: &str, fact_text: &str) -> CorrectionAttempt {
    match parse_correction_output(raw) {
        Ok(RawCorrection::Rewrite(rewrite)) => CorrectionAttempt::Rejected {
            proposed: Some(rewrite),
            note: "revision changed text outside the listed factors".to_string(),
        },
        Ok(RawCorrection::Pairs(pairs)) => match apply_pairs(fact_text, &pairs) {
            Some(applied) => CorrectionAttempt::Rejected {
                proposed: Some(applied),
                note: "revision changed text outside the listed factors".to_string(),
            },
            None => CorrectionAttempt::Rejected {
                proposed: None,
                note: format!("no correction pair matched the fact: `{}`", head(raw)),
            },
        },
        _ => CorrectionAttempt::Rejected {
            proposed: None,
            note: format!("unusable correction output: `{}`", head(raw)),
        },
    }
}

/// What one correction iteration decided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationDecision {
    Accepted,
    Rejected,
    NoError,
    Errored,
}

/// How one low-confidence fact's loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactOutcome {
    Accepted,
    KeptOriginal,
    NoError,
    Errored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factors: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposed_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reestimated_confidence: Option<f64>,
    pub decision: IterationDecision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactLog {
    pub fact_index: usize,
    pub original_text: String,
    pub original_confidence: f64,
    pub iterations: Vec<IterationRecord>,
    pub outcome: FactOutcome,
}

/// Complete record of one self-correction run over one response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfixTrace {
    pub query_id: String,
    /// Mean confidence used as the partition threshold; absent when no fact
    /// carried a score.
    pub threshold: Option<f64>,
    pub high_fact_indices: Vec<usize>,
    pub low_fact_indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unscored_fact_indices: Vec<usize>,
    pub fact_logs: Vec<FactLog>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub final_facts: Vec<String>,
    pub final_confidences: Vec<Option<f64>>,
}

impl ConfixTrace {
    fn new(query_id: &str) -> Self {
        Self {
            query_id: query_id.to_string(),
            threshold: None,
            high_fact_indices: Vec::new(),
            low_fact_indices: Vec::new(),
            unscored_fact_indices: Vec::new(),
            fact_logs: Vec::new(),
            notes: Vec::new(),
            final_facts: Vec::new(),
            final_confidences: Vec::new(),
        }
    }

    fn finalize(mut self, facts: &[FactUnit]) -> Self {
        self.final_facts = facts.iter().map(|fact| fact.text.clone()).collect();
        self.final_confidences =
            facts.iter().map(|fact| fact.confidence.map(|score| score.value())).collect();
        self
    }
}

/// Runs the full self-correction loop over one response and returns the
/// revised record plus its trace.
///
/// The partition threshold is computed once from the initial confidence
/// vector. High-group facts pass through byte-identical and serve as the
/// reference knowledge for correcting low-group facts. A proposed revision
/// is accepted only when its re-estimated confidence (against the original
/// response text) strictly exceeds the fact's current score; otherwise the
/// original text is kept. Facts whose backends fail are marked errored and
/// the run continues. When an accepted fact's original text appears verbatim
/// in the response, the response text is updated in place as well.
pub fn run_confix(
    config: &ConfixConfig,
    backends: &EstimatorBackends<'_>,
    templates: &TemplateSet,
    query: &QueryRecord,
    response: &ResponseRecord,
) -> Result<(ResponseRecord, ConfixTrace), ConfixError> {
    if config.max_iterations == 0 {
        return Err(ConfixError::ZeroIterations);
    }
    let mut revised = response.clone();
    let mut trace = ConfixTrace::new(&response.query_id);

    let scored: Vec<(usize, f64)> = revised
        .facts
        .iter()
        .enumerate()
        .filter_map(|(position, fact)| Some((position, fact.confidence?.value())))
        .collect();
    trace.unscored_fact_indices = revised
        .facts
        .iter()
        .filter(|fact| fact.confidence.is_none())
        .map(|fact| fact.index)
        .collect();

    if scored.is_empty() {
        trace.notes.push("no scored facts; self-correction skipped".to_string());
        let trace = trace.finalize(&revised.facts);
        return Ok((revised, trace));
    }

    let confidences: Vec<f64> = scored.iter().map(|&(_, value)| value).collect();
    let partition = partition_facts(&confidences)?;
    trace.threshold = Some(partition.threshold());
    let fact_index_at = |scored_position: usize| revised.facts[scored[scored_position].0].index;
    trace.high_fact_indices = partition.high().iter().map(|&i| fact_index_at(i)).collect();
    trace.low_fact_indices = partition.low().iter().map(|&i| fact_index_at(i)).collect();

    if partition.low().is_empty() {
        trace
            .notes
            .push("every fact is at or above the mean confidence; nothing to correct".to_string());
        let trace = trace.finalize(&revised.facts);
        return Ok((revised, trace));
    }

    let reference_block: String = partition
        .high()
        .iter()
        .map(|&scored_position| {
            let fact = &revised.facts[scored[scored_position].0];
            if config.include_reference_scores {
                let confidence = fact.confidence.expect("high-group facts are scored").value();
                format!("- {} (confidence {confidence:.2})", fact.text)
            } else {
                format!("- {}", fact.text)
            }
        })
        .collect::<Vec<_>>()
        .join("\n");

    let low_positions: Vec<usize> =
        partition.low().iter().map(|&scored_position| scored[scored_position].0).collect();
    for position in low_positions {
        let log = correct_one_fact(
            config,
            backends,
            templates,
            query,
            &response.text,
            &mut revised.facts[position],
            &reference_block,
        )?;
        if log.outcome == FactOutcome::Accepted {
            if let Some(at) = revised.text.find(&log.original_text) {
                let new_text = revised.facts[position].text.clone();
                revised.text.replace_range(at..at + log.original_text.len(), &new_text);
            }
        }
        trace.fact_logs.push(log);
    }

    let trace = trace.finalize(&revised.facts);
    Ok((revised, trace))
}

fn correct_one_fact(
    config: &ConfixConfig,
    backends: &EstimatorBackends<'_>,
    templates: &TemplateSet,
    query: &QueryRecord,
    original_response_text: &str,
    fact: &mut FactUnit,
    reference_block: &str,
) -> Result<FactLog, ConfixError> {
    let original_text = fact.text.clone();
    let original_confidence =
        fact.confidence.expect("low-group facts carry a confidence score").value();
    let mut iterations = Vec::new();
    let mut outcome = FactOutcome::KeptOriginal;

    for iteration in 1..=config.max_iterations {
        let factors =
            match extract_factors(backends.tool, templates, backends.tool_model, &original_text) {
                Ok(factors) => factors,
                Err(error) => {
                    iterations.push(errored_iteration(iteration, None, error.to_string()));
                    outcome = FactOutcome::Errored;
                    break;
                }
            };
        fact.factors = Some(factors.clone());
        let factor_names = factors.factors().to_vec();

        let attempt = match correct_fact(
            backends.subject,
            templates,
            backends.subject_model,
            &original_text,
            &factors,
            reference_block,
        ) {
            Ok(attempt) => attempt,
            Err(ConfixError::Backend(error)) => {
                iterations.push(errored_iteration(
                    iteration,
                    Some(factor_names),
                    error.to_string(),
                ));
                outcome = FactOutcome::Errored;
                break;
            }
            Err(other) => return Err(other),
        };

        match attempt {
            CorrectionAttempt::NoError => {
                iterations.push(IterationRecord {
                    iteration,
                    factors: Some(factor_names),
                    proposed_text: None,
                    reestimated_confidence: None,
                    decision: IterationDecision::NoError,
                    note: None,
                });
                outcome = FactOutcome::NoError;
                break;
            }
            CorrectionAttempt::Rejected { proposed, note } => {
                iterations.push(IterationRecord {
                    iteration,
                    factors: Some(factor_names),
                    proposed_text: proposed,
                    reestimated_confidence: None,
                    decision: IterationDecision::Rejected,
                    note: Some(note),
                });
            }
            CorrectionAttempt::Revised(proposed) => {
                let new_score = match estimate_fact_confidence(
                    &config.estimator,
                    backends,
                    templates,
                    &query.query,
                    original_response_text,
                    &proposed,
                ) {
                    Ok(score) => score,
                    Err(error) => {
                        iterations.push(errored_iteration(
                            iteration,
                            Some(factor_names),
                            error.to_string(),
                        ));
                        outcome = FactOutcome::Errored;
                        break;
                    }
                };
                let accepted = new_score.value() > original_confidence;
                fact.revisions.push(Revision {
                    text: proposed.clone(),
                    confidence: new_score,
                    accepted,
                });
                iterations.push(IterationRecord {
                    iteration,
                    factors: Some(factor_names),
                    proposed_text: Some(proposed.clone()),
                    reestimated_confidence: Some(new_score.value()),
                    decision: if accepted {
                        IterationDecision::Accepted
                    } else {
                        IterationDecision::Rejected
                    },
                    note: None,
                });
                if accepted {
                    fact.text = proposed;
                    fact.confidence = Some(new_score);
                    outcome = FactOutcome::Accepted;
                    break;
                }
            }
        }
    }

    Ok(FactLog {
        fact_index: fact.index,
        original_text,
        original_confidence,
        iterations,
        outcome,
    })
}

fn errored_iteration(
    iteration: usize,
    factors: Option<Vec<String>>,
    message: String,
) -> IterationRecord {
    IterationRecord {
        iteration,
        factors,
        proposed_text: None,
        reestimated_confidence: None,
        decision: IterationDecision::Errored,
        note: Some(message),
    }
}
