//! Correctness and relevance grading of extracted facts via pluggable
//! oracles: deterministic reference-answer matching, a judge backend, or a
//! checked-in fixture file. Grading never mutates records; callers write the
//! scores onto facts.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, BackendHandle, CompletionRequest, Message};
use crate::domain::{normalize_span, DomainError, QueryRecord, UnitScore, GRADE_ROW_SCHEMA};
use crate::extraction::{complete_and_parse, head, parse_unit_score};
use crate::prompts::{PromptError, TemplateName, TemplateSet};

#[derive(Debug, Error)]
pub enum GradingError {
    #[error("reference matching needs a non-empty reference list for query `{0}`")]
    MissingReferences(String),
    #[error("fixture has no grade for query `{query_id}` fact {fact_index}")]
    FixtureMiss { query_id: String, fact_index: usize },
    #[error("no SUPPORTED/NOT_SUPPORTED verdict in judge output after one reformat attempt: `{raw_head}`")]
    UnparseableVerdict { raw_head: String },
    #[error("no unit-interval relevance score in judge output after one reformat attempt: `{raw_head}`")]
    UnparseableRelevance { raw_head: String },
    #[error("fixture `{}`: {message}", path.display())]
    FixtureFile { path: PathBuf, message: String },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// One fixture row: frozen grades for a (query, fact) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradeRow {
    pub query_id: String,
    pub fact_index: usize,
    pub correctness: UnitScore,
    pub relevance: UnitScore,
}

/// Grades loaded from a fixture file, keyed by query id and fact index.
#[derive(Debug, Clone, Default)]
pub struct FixtureGrades {
    rows: HashMap<(String, usize), (UnitScore, UnitScore)>,
}

impl FixtureGrades {
    pub fn from_rows(rows: impl IntoIterator<Item = GradeRow>) -> Self {
        let rows = rows
            .into_iter()
            .map(|row| ((row.query_id, row.fact_index), (row.correctness, row.relevance)))
            .collect();
        Self { rows }
    }

    /// Loads line-delimited `{query_id, fact_index, correctness, relevance}`
    /// rows.
    pub fn from_file(path: &Path) -> Result<Self, GradingError> {
        let rows: Vec<GradeRow> =
            crate::domain::read_jsonl(path, GRADE_ROW_SCHEMA).map_err(|e: DomainError| {
                GradingError::FixtureFile { path: path.to_path_buf(), message: e.to_string() }
            })?;
        Ok(Self::from_rows(rows))
    }

    fn get(&self, query_id: &str, fact_index: usize) -> Option<(UnitScore, UnitScore)> {
        self.rows.get(&(query_id.to_string(), fact_index)).copied()
    }
}

/// Where grades come from.
pub enum GradingOracle {
    /// A fact is correct iff it matches one of the query's reference answers
    /// (case-insensitive, whitespace-normalized containment either way).
    /// Grades correctness only; every fact counts as fully relevant.
    ReferenceMatch,
    /// A judge model grades both correctness (SUPPORTED / NOT_SUPPORTED) and
    /// relevance (verbalized 0–1 score).
    JudgeBackend { backend: BackendHandle, model_id: String },
    /// Frozen grades from a fixture file; must be total over the graded
    /// facts.
    Fixture(FixtureGrades),
}

impl GradingOracle {
    /// Short name for manifests and progress lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::ReferenceMatch => "reference_match",
            Self::JudgeBackend { .. } => "judge",
            Self::Fixture(_) => "fixture",
        }
    }
}

/// Grades whether one fact is correct.
pub fn grade_correctness(
    oracle: &GradingOracle,
    templates: &TemplateSet,
    query: &QueryRecord,
    fact_index: usize,
    fact_text: &str,
) -> Result<UnitScore, GradingError> {
    match oracle {
        GradingOracle::ReferenceMatch => {
            if query.references.is_empty() {
                return Err(GradingError::MissingReferences(query.id.clone()));
            }
            let fact_key = normalize_span(fact_text);
            let matched = query.references.iter().any(|reference| {
                let ref_key = normalize_span(reference);
                fact_key.contains(&ref_key) || ref_key.contains(&fact_key)
            });
            Ok(UnitScore::new(if matched { 1.0 } else { 0.0 }).expect("binary score"))
        }
        GradingOracle::JudgeBackend { backend, model_id } => {
            let references = render_references(&query.references);
            let prompt = templates.render(
                TemplateName::CorrectnessJudge,
                &[
                    ("question", query.query.as_str()),
                    ("references", references.as_str()),
                    ("fact", fact_text),
                ],
            )?;
            let request = CompletionRequest::new(model_id.clone(), vec![Message::user(prompt)])
                .with_max_tokens(8);
            let verdict = complete_and_parse(
                backend.as_ref(),
                &request,
                "Reply with exactly one word: SUPPORTED or NOT_SUPPORTED.",
                parse_support_verdict,
            )?;
            match verdict {
                Ok(supported) => {
                    Ok(UnitScore::new(if supported { 1.0 } else { 0.0 }).expect("binary score"))
                }
                Err(raw) => Err(GradingError::UnparseableVerdict { raw_head: head(&raw) }),
            }
        }
        GradingOracle::Fixture(grades) => grades
            .get(&query.id, fact_index)
            .map(|(correctness, _)| correctness)
            .ok_or_else(|| GradingError::FixtureMiss {
                query_id: query.id.clone(),
                fact_index,
            }),
    }
}

/// Grades how relevant one fact is to its query in the context of the full
/// response.
pub fn grade_relevance(
    oracle: &GradingOracle,
    templates: &TemplateSet,
    query: &QueryRecord,
    response_text: &str,
    fact_index: usize,
    fact_text: &str,
) -> Result<UnitScore, GradingError> {
    match oracle {
        GradingOracle::ReferenceMatch => {
            if query.references.is_empty() {
                return Err(GradingError::MissingReferences(query.id.clone()));
            }
            Ok(UnitScore::new(1.0).expect("constant relevance"))
        }
        GradingOracle::JudgeBackend { backend, model_id } => {
            let prompt = templates.render(
                TemplateName::RelevanceJudge,
                &[
                    ("question", query.query.as_str()),
                    ("response", response_text),
                    ("fact", fact_text),
                ],
            )?;
            let request = CompletionRequest::new(model_id.clone(), vec![Message::user(prompt)])
                .with_max_tokens(8);
            let score = complete_and_parse(
                backend.as_ref(),
                &request,
                crate::extraction::SCORE_REMINDER,
                parse_unit_score,
            )?;
            match score {
                Ok(score) => Ok(score),
                Err(raw) => Err(GradingError::UnparseableRelevance { raw_head: head(&raw) }),
            }
        }
        GradingOracle::Fixture(grades) => grades
            .get(&query.id, fact_index)
            .map(|(_, relevance)| relevance)
            .ok_or_else(|| GradingError::FixtureMiss {
                query_id: query.id.clone(),
                fact_index,
            }),
    }
}

fn render_references(references: &[String]) -> String {
    if references.is_empty() {
        return "(none)".to_string();
    }
    references
        .iter()
        .map(|r| format!("- {r}"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn parse_support_verdict(text: &str) -> Result<bool, ()> {
    let upper = text.to_ascii_uppercase();
    // Check the negative label first: it contains the positive one.
    if upper.contains("NOT_SUPPORTED") || upper.contains("NOT SUPPORTED") {
        Ok(false)
    } else if upper.contains("SUPPORTED") {
        Ok(true)
    } else {
        Err(())
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::backend::mock::{Matcher, MockScript, ScriptEntry};
    use crate::backend::MockBackend;
    use crate::domain::DatasetSource;

    fn query(references: &[&str]) -> QueryRecord {
        QueryRecord {
            id: "q1".to_string(),
            query: "Who won the 1900 marathon?".to_string(),
            references: references.iter().map(|s| s.to_string()).collect(),
            source: DatasetSource::Asqa,
        }
    }

    fn judge_oracle(reply: &str) -> GradingOracle {
        let backend = MockBackend::scripted(MockScript {
            logprobs_supported: true,
            entries: vec![ScriptEntry {
                matcher: Matcher::Contains("FACT:".to_string()),
                responses: vec![reply.to_string()],
                token_logprobs: None,
                fail_times: 0,
                fail: false,
            }],
        });
        GradingOracle::JudgeBackend { backend: Arc::new(backend), model_id: "judge-m".to_string() }
    }

    #[test]
    fn reference_match_is_case_insensitive_containment() {
        let templates = TemplateSet::builtin();
        let q = query(&["Michel Théato"]);
        let hit = grade_correctness(
            &GradingOracle::ReferenceMatch,
            &templates,
            &q,
            0,
            "The 1900 marathon was won by MICHEL THÉATO.",
        )
        .unwrap();
        assert_eq!(hit.value(), 1.0);
        let miss =
            grade_correctness(&GradingOracle::ReferenceMatch, &templates, &q, 0, "Someone else won.")
                .unwrap();
        assert_eq!(miss.value(), 0.0);
    }

    #[test]
    fn reference_match_requires_references() {
        let templates = TemplateSet::builtin();
        let q = query(&[]);
        assert!(matches!(
            grade_correctness(&GradingOracle::ReferenceMatch, &templates, &q, 0, "fact"),
            Err(GradingError::MissingReferences(_))
        ));
        assert!(matches!(
            grade_relevance(&GradingOracle::ReferenceMatch, &templates, &q, "r", 0, "fact"),
            Err(GradingError::MissingReferences(_))
        ));
    }

    #[test]
    fn reference_match_treats_every_fact_as_fully_relevant() {
        let templates = TemplateSet::builtin();
        let q = query(&["anything"]);
        let rel =
            grade_relevance(&GradingOracle::ReferenceMatch, &templates, &q, "r", 0, "fact").unwrap();
        assert_eq!(rel.value(), 1.0);
    }

    #[test]
    fn judge_maps_support_labels_to_binary_scores() {
        let templates = TemplateSet::builtin();
        let q = query(&[]);
        let supported =
            grade_correctness(&judge_oracle("SUPPORTED"), &templates, &q, 0, "fact").unwrap();
        assert_eq!(supported.value(), 1.0);
        let not = grade_correctness(
            &judge_oracle("The fact is NOT_SUPPORTED by the references."),
            &templates,
            &q,
            0,
            "fact",
        )
        .unwrap();
        assert_eq!(not.value(), 0.0);
    }

    #[test]
    fn judge_garbage_twice_is_a_grading_error() {
        let templates = TemplateSet::builtin();
        let q = query(&[]);
        let err = grade_correctness(&judge_oracle("shrug"), &templates, &q, 0, "fact").unwrap_err();
        assert!(matches!(err, GradingError::UnparseableVerdict { .. }));
    }

    #[test]
    fn judge_relevance_goes_through_the_score_parser() {
        let templates = TemplateSet::builtin();
        let q = query(&[]);
        let rel = grade_relevance(&judge_oracle("0.80"), &templates, &q, "resp", 0, "fact").unwrap();
        assert_eq!(rel.value(), 0.8);
        let err =
            grade_relevance(&judge_oracle("quite relevant"), &templates, &q, "resp", 0, "fact")
                .unwrap_err();
        assert!(matches!(err, GradingError::UnparseableRelevance { .. }));
    }

    #[test]
    fn fixture_lookup_hits_and_misses() {
        let templates = TemplateSet::builtin();
        let q = query(&[]);
        let grades = FixtureGrades::from_rows(vec![GradeRow {
            query_id: "q1".to_string(),
            fact_index: 0,
            correctness: UnitScore::new(1.0).unwrap(),
            relevance: UnitScore::new(0.5).unwrap(),
        }]);
        let oracle = GradingOracle::Fixture(grades);
        assert_eq!(grade_correctness(&oracle, &templates, &q, 0, "f").unwrap().value(), 1.0);
        assert_eq!(grade_relevance(&oracle, &templates, &q, "r", 0, "f").unwrap().value(), 0.5);
        assert!(matches!(
            grade_correctness(&oracle, &templates, &q, 1, "f"),
            Err(GradingError::FixtureMiss { fact_index: 1, .. })
        ));
    }

    #[test]
    fn fixture_file_round_trips_and_validates_scores() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grades.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"query_id\": \"q1\", \"fact_index\": 0, \"correctness\": 1.0, \"relevance\": 0.5}\n",
                "{\"query_id\": \"q1\", \"fact_index\": 1, \"correctness\": 0.0, \"relevance\": 1.0}\n"
            ),
        )
        .unwrap();
        let grades = FixtureGrades::from_file(&path).unwrap();
        assert_eq!(grades.get("q1", 1).unwrap().0.value(), 0.0);

        std::fs::write(&path, "{\"query_id\": \"q1\", \"fact_index\": 0, \"correctness\": 1.5, \"relevance\": 0.5}\n")
            .unwrap();
        assert!(matches!(
            FixtureGrades::from_file(&path),
            Err(GradingError::FixtureFile { .. })
        ));
    }
}
