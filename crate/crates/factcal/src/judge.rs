//! Pairwise evaluation of accepted revisions: a judge model compares the
//! original and revised fact in context and labels the change improved,
//! same, or regressed; ratios are aggregated over a run.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, CompletionRequest, Message};
use crate::extraction::{complete_and_parse, head};
use crate::prompts::{PromptError, TemplateName, TemplateSet};

const JUDGE_REMINDER: &str = "Reply in exactly this format:\nCOMPARISON: <one-sentence \
comparison of the two facts>\nREVISION: <\"IMPROVED\", \"SAME\", or \"REGRESSED\">";

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("no REVISION line with a usable verdict after one reformat attempt: `{raw_head}`")]
    MissingVerdict { raw_head: String },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictLabel {
    Improved,
    Same,
    Regressed,
}

/// One judged revision: the judge's one-sentence comparison and its label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub comparison: String,
    pub label: VerdictLabel,
}

fn strip_prefix_ci<'a>(line: &'a str, prefix: &str) -> Option<&'a str> {
    let candidate = line.get(..prefix.len())?;
    candidate.eq_ignore_ascii_case(prefix).then(|| &line[prefix.len()..])
}

fn parse_label(text: &str) -> Option<VerdictLabel> {
    text.split(|c: char| !c.is_alphabetic())
        .filter(|token| !token.is_empty())
        .find_map(|token| match token.to_ascii_lowercase().as_str() {
            "improved" => Some(VerdictLabel::Improved),
            "same" => Some(VerdictLabel::Same),
            "regressed" => Some(VerdictLabel::Regressed),
            _ => None,
        })
}

/// Parses judge output. The label comes from the final REVISION line
/// (case-insensitive); the comparison from the first COMPARISON line.
fn parse_judgment(text: &str) -> Result<JudgeVerdict, ()> {
    let verdict_text = text
        .lines()
        .rev()
        .find_map(|line| strip_prefix_ci(line.trim(), "REVISION:"))
        .ok_or(())?;
    let label = parse_label(verdict_text).ok_or(())?;
    let comparison = text
        .lines()
        .find_map(|line| strip_prefix_ci(line.trim(), "COMPARISON:"))
        .map(|rest| rest.trim().to_string())
        .unwrap_or_default();
    Ok(JudgeVerdict { comparison, label })
}

/// Judges whether a revised fact improves on the original in the context of
/// the query, the full response, and the other facts. Identical texts are
/// counted as `Same` without a model call.
#[allow(clippy::too_many_arguments)]
pub fn judge_revision(
    backend: &dyn Backend,
    templates: &TemplateSet,
    model_id: &str,
    query: &str,
    response_text: &str,
    all_facts: &[String],
    original_fact: &str,
    revised_fact: &str,
) -> Result<JudgeVerdict, JudgeError> {
    if original_fact == revised_fact {
        return Ok(JudgeVerdict {
            comparison: "the two versions are identical; judged same without a model call"
                .to_string(),
            label: VerdictLabel::Same,
        });
    }
    let fact_list =
        all_facts.iter().map(|fact| format!("- {fact}")).collect::<Vec<_>>().join("\n");
    let prompt = templates.render(
        TemplateName::Judge,
        &[
            ("question", query),
            ("response", response_text),
            ("all_facts", fact_list.as_str()),
            ("original_fact", original_fact),
            ("new_fact", revised_fact),
        ],
    )?;
    let request = CompletionRequest::new(model_id.to_string(), vec![Message::user(prompt)]);
    match complete_and_parse(backend, &request, JUDGE_REMINDER, parse_judgment)? {
        Ok(verdict) => Ok(verdict),
        Err(raw) => Err(JudgeError::MissingVerdict { raw_head: head(&raw) }),
    }
}

/// Verdict counts and ratios over one run. Ratios are `None` when nothing
/// was judged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgmentSummary {
    pub revised_count: usize,
    pub improved: usize,
    pub same: usize,
    pub regressed: usize,
    pub improved_ratio: Option<f64>,
    pub same_ratio: Option<f64>,
    pub regressed_ratio: Option<f64>,
}

pub fn aggregate_judgments(verdicts: &[JudgeVerdict]) -> JudgmentSummary {
    let count = |label: VerdictLabel| verdicts.iter().filter(|v| v.label == label).count();
    let improved = count(VerdictLabel::Improved);
    let same = count(VerdictLabel::Same);
    let regressed = count(VerdictLabel::Regressed);
    let ratio = |value: usize| {
        (!verdicts.is_empty()).then(|| value as f64 / verdicts.len() as f64)
    };
    JudgmentSummary {
        revised_count: verdicts.len(),
        improved,
        same,
        regressed,
        improved_ratio: ratio(improved),
        same_ratio: ratio(same),
        regressed_ratio: ratio(regressed),
    }
}
