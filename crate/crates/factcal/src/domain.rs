//! Core record types shared by every stage: queries, responses, facts, factor
//! sets, and confidence partitions, plus dataset normalization and the
//! line-delimited on-disk record format.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::atomic_write;

/// Schema tag for query records written to disk.
pub const QUERY_SCHEMA: &str = "factcal.query.v1";
/// Schema tag for response records (with embedded facts) written to disk.
pub const RESPONSE_SCHEMA: &str = "factcal.response.v1";
/// Schema tag for flat per-fact rows emitted by the extract command.
pub const FACT_ROW_SCHEMA: &str = "factcal.fact.v1";
/// Schema tag for fixture grading rows.
pub const GRADE_ROW_SCHEMA: &str = "factcal.grade.v1";

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("score {0} is outside the unit interval [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("factor list is empty after trimming and deduplication")]
    EmptyFactorSet,
    #[error("dataset line {line}: {message}")]
    DatasetLine { line: usize, message: String },
    #[error("dataset contains no records")]
    EmptyDataset,
    #[error("duplicate query id `{0}` in dataset")]
    DuplicateQueryId(String),
    #[error("inconsistent partition: {0}")]
    InvalidPartition(String),
    #[error("expected schema `{expected}`, found `{found}`")]
    SchemaMismatch { expected: String, found: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{} line {line}: {message}", path.display())]
    RecordLine {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// A confidence, correctness, or relevance value, guaranteed finite and
/// within `[0, 1]` from construction onward.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct UnitScore(f64);

impl UnitScore {
    pub fn new(value: f64) -> Result<Self, DomainError> {
        if value.is_finite() && (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(DomainError::ScoreOutOfRange(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for UnitScore {
    type Error = DomainError;
    fn try_from(value: f64) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<UnitScore> for f64 {
    fn from(score: UnitScore) -> f64 {
        score.0
    }
}

impl std::fmt::Display for UnitScore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Where a dataset's queries came from; selects the normalization rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Asqa,
    Longfact,
    Custom,
}

impl FromStr for DatasetSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "asqa" => Ok(Self::Asqa),
            "longfact" => Ok(Self::Longfact),
            "custom" => Ok(Self::Custom),
            other => Err(format!(
                "unknown dataset source `{other}` (expected asqa, longfact, or custom)"
            )),
        }
    }
}

impl std::fmt::Display for DatasetSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Self::Asqa => "asqa",
            Self::Longfact => "longfact",
            Self::Custom => "custom",
        };
        f.write_str(name)
    }
}

/// One input question, with any reference answers the dataset supplies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub query: String,
    #[serde(default)]
    pub references: Vec<String>,
    pub source: DatasetSource,
}

/// A model response to one query, carrying its extracted facts once the
/// extraction stage has run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub query_id: String,
    pub model_id: String,
    pub text: String,
    /// Verbalized confidence in the whole response, filled by estimation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_confidence: Option<UnitScore>,
    #[serde(default)]
    pub facts: Vec<FactUnit>,
}

/// One atomic fact extracted from a response. Scores stay `None` until the
/// corresponding stage fills them in; `revisions` grows append-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactUnit {
    pub index: usize,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<UnitScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correctness: Option<UnitScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance: Option<UnitScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factors: Option<FactorSet>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub revisions: Vec<Revision>,
}

impl FactUnit {
    pub fn new(index: usize, text: impl Into<String>) -> Self {
        Self {
            index,
            text: text.into(),
            confidence: None,
            correctness: None,
            relevance: None,
            factors: None,
            revisions: Vec::new(),
        }
    }
}

/// One proposed rewrite of a fact, with the confidence it re-estimated to and
/// whether the correction loop accepted it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Revision {
    pub text: String,
    pub confidence: UnitScore,
    pub accepted: bool,
}

/// The key factors of one fact: trimmed, non-empty, deduplicated
/// case-insensitively with first spelling kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct FactorSet {
    factors: Vec<String>,
}

impl FactorSet {
    pub fn new(raw: impl IntoIterator<Item = String>) -> Result<Self, DomainError> {
        let mut seen = HashSet::new();
        let mut factors = Vec::new();
        for item in raw {
            let trimmed = item.trim();
            if trimmed.is_empty() {
                continue;
            }
            let key = normalize_span(trimmed);
            if seen.insert(key) {
                factors.push(trimmed.to_string());
            }
        }
        if factors.is_empty() {
            return Err(DomainError::EmptyFactorSet);
        }
        Ok(Self { factors })
    }

    pub fn factors(&self) -> &[String] {
        &self.factors
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }
}

impl TryFrom<Vec<String>> for FactorSet {
    type Error = DomainError;
    fn try_from(raw: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(raw)
    }
}

impl From<FactorSet> for Vec<String> {
    fn from(set: FactorSet) -> Vec<String> {
        set.factors
    }
}

/// Lowercases and collapses runs of whitespace; the comparison key used
/// wherever two spans of text are matched case-insensitively.
pub fn normalize_span(text: &str) -> String {
    text.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// A split of fact indices into a high- and a low-confidence group around a
/// threshold. Construction validates that the groups are disjoint, sorted,
/// and together cover every index exactly once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PartitionRepr", into = "PartitionRepr")]
pub struct Partition {
    threshold: f64,
    high: Vec<usize>,
    low: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct PartitionRepr {
    threshold: f64,
    high: Vec<usize>,
    low: Vec<usize>,
}

impl Partition {
    /// Splits a confidence vector around its arithmetic mean: indices with
    /// confidence at or above the mean land in the high group, the rest in
    /// the low group.
    pub fn from_confidences(confidences: &[f64]) -> Result<Self, DomainError> {
        if confidences.is_empty() {
            return Err(DomainError::InvalidPartition(
                "confidence vector is empty".to_string(),
            ));
        }
        for &c in confidences {
            if !(c.is_finite() && (0.0..=1.0).contains(&c)) {
                return Err(DomainError::ScoreOutOfRange(c));
            }
        }
        // The arithmetic mean lies in [min, max] mathematically, but
        // floating-point summation can drift just outside (e.g. the mean of
        // three equal values landing one ulp above them, which would empty
        // the high group). Clamping restores the invariant.
        let lowest = confidences.iter().copied().fold(f64::INFINITY, f64::min);
        let highest = confidences.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let threshold = (confidences.iter().sum::<f64>() / confidences.len() as f64)
            .clamp(lowest, highest);
        let mut high = Vec::new();
        let mut low = Vec::new();
        for (i, &c) in confidences.iter().enumerate() {
            if c >= threshold {
                high.push(i);
            } else {
                low.push(i);
            }
        }
        Ok(Self { threshold, high, low })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn high(&self) -> &[usize] {
        &self.high
    }

    pub fn low(&self) -> &[usize] {
        &self.low
    }

    /// Total number of partitioned indices.
    pub fn len(&self) -> usize {
        self.high.len() + self.low.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_low(&self, index: usize) -> bool {
        self.low.binary_search(&index).is_ok()
    }

    fn check(threshold: f64, high: &[usize], low: &[usize]) -> Result<(), DomainError> {
        if !threshold.is_finite() {
            return Err(DomainError::InvalidPartition(format!(
                "threshold {threshold} is not finite"
            )));
        }
        let n = high.len() + low.len();
        if n == 0 {
            return Err(DomainError::InvalidPartition("both groups are empty".to_string()));
        }
        for group in [high, low] {
            if !group.windows(2).all(|w| w[0] < w[1]) {
                return Err(DomainError::InvalidPartition(
                    "group indices are not strictly ascending".to_string(),
                ));
            }
        }
        let mut all: Vec<usize> = high.iter().chain(low.iter()).copied().collect();
        all.sort_unstable();
        if all != (0..n).collect::<Vec<_>>() {
            return Err(DomainError::InvalidPartition(format!(
                "groups do not cover 0..{n} exactly once"
            )));
        }
        Ok(())
    }
}

impl TryFrom<PartitionRepr> for Partition {
    type Error = DomainError;
    fn try_from(repr: PartitionRepr) -> Result<Self, Self::Error> {
        Self::check(repr.threshold, &repr.high, &repr.low)?;
        Ok(Self {
            threshold: repr.threshold,
            high: repr.high,
            low: repr.low,
        })
    }
}

impl From<Partition> for PartitionRepr {
    fn from(p: Partition) -> PartitionRepr {
        PartitionRepr {
            threshold: p.threshold,
            high: p.high,
            low: p.low,
        }
    }
}

/// Parses a line-delimited dataset into uniform query records.
///
/// Each line must be one structured record in the shape of the named source:
/// `asqa` lines carry `question` and optional `answers`, `longfact` lines
/// carry `prompt`, and `custom` lines carry `query` with optional
/// `references`. Records without an `id` get a stable one derived from their
/// 1-based line number.
pub fn normalize_dataset(text: &str, source: DatasetSource) -> Result<Vec<QueryRecord>, DomainError> {
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| DomainError::DatasetLine {
                line: lineno,
                message: e.to_string(),
            })?;
        let obj = value.as_object().ok_or_else(|| DomainError::DatasetLine {
            line: lineno,
            message: "record is not an object".to_string(),
        })?;

        let query_field = match source {
            DatasetSource::Asqa => "question",
            DatasetSource::Longfact => "prompt",
            DatasetSource::Custom => "query",
        };
        let query = obj
            .get(query_field)
            .and_then(|v| v.as_str())
            .map(str::trim)
            .filter(|q| !q.is_empty())
            .ok_or_else(|| DomainError::DatasetLine {
                line: lineno,
                message: format!("missing or empty `{query_field}` field"),
            })?;

        let references_field = match source {
            DatasetSource::Asqa => Some("answers"),
            DatasetSource::Longfact => None,
            DatasetSource::Custom => Some("references"),
        };
        let mut references = Vec::new();
        if let Some(field) = references_field {
            if let Some(v) = obj.get(field) {
                let items = v.as_array().ok_or_else(|| DomainError::DatasetLine {
                    line: lineno,
                    message: format!("`{field}` is not an array"),
                })?;
                for item in items {
                    let s = item.as_str().ok_or_else(|| DomainError::DatasetLine {
                        line: lineno,
                        message: format!("`{field}` contains a non-string entry"),
                    })?;
                    if !s.trim().is_empty() {
                        references.push(s.trim().to_string());
                    }
                }
            }
        }

        let id = match obj.get("id") {
            Some(v) => v
                .as_str()
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .ok_or_else(|| DomainError::DatasetLine {
                    line: lineno,
                    message: "`id` is not a non-empty string".to_string(),
                })?,
            None => format!("q{lineno:04}"),
        };
        if !ids.insert(id.clone()) {
            return Err(DomainError::DuplicateQueryId(id));
        }

        records.push(QueryRecord {
            id,
            query: query.to_string(),
            references,
            source,
        });
    }
    if records.is_empty() {
        return Err(DomainError::EmptyDataset);
    }
    Ok(records)
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema: &'a str,
    #[serde(flatten)]
    record: &'a T,
}

/// Writes records as line-delimited JSON, one object per line, each tagged
/// with a top-level `schema` field. The write is atomic.
pub fn write_jsonl<T: Serialize>(path: &Path, schema: &str, records: &[T]) -> Result<(), DomainError> {
    let mut out = String::new();
    for record in records {
        let line = serde_json::to_string(&Envelope { schema, record }).map_err(|e| {
            DomainError::RecordLine {
                path: path.to_path_buf(),
                line: 0,
                message: e.to_string(),
            }
        })?;
        out.push_str(&line);
        out.push('\n');
    }
    atomic_write(path, out.as_bytes()).map_err(|source| DomainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads line-delimited JSON records, checking the `schema` tag of any line
/// that carries one against `expected_schema`.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path, expected_schema: &str) -> Result<Vec<T>, DomainError> {
    let text = std::fs::read_to_string(path).map_err(|source| DomainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| DomainError::RecordLine {
                path: path.to_path_buf(),
                line: lineno,
                message: e.to_string(),
            })?;
        if let Some(found) = value.get("schema").and_then(|s| s.as_str()) {
            if found != expected_schema {
                return Err(DomainError::SchemaMismatch {
                    expected: expected_schema.to_string(),
                    found: found.to_string(),
                });
            }
        }
        let record: T = serde_json::from_value(value).map_err(|e| DomainError::RecordLine {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unit_score_rejects_out_of_range_and_non_finite() {
        assert!(UnitScore::new(0.0).is_ok());
        assert!(UnitScore::new(1.0).is_ok());
        assert!(UnitScore::new(-0.01).is_err());
        assert!(UnitScore::new(1.01).is_err());
        assert!(UnitScore::new(f64::NAN).is_err());
        assert!(UnitScore::new(f64::INFINITY).is_err());
    }

    #[test]
    fn unit_score_deserialization_validates() {
        let ok: UnitScore = serde_json::from_str("0.85").unwrap();
        assert_eq!(ok.value(), 0.85);
        assert!(serde_json::from_str::<UnitScore>("1.5").is_err());
    }

    #[test]
    fn factor_set_trims_and_dedups_case_insensitively() {
        let set = FactorSet::new(vec![
            " Paris ".to_string(),
            "1900  Olympics".to_string(),
            "paris".to_string(),
            "".to_string(),
            "1900 olympics".to_string(),
        ])
        .unwrap();
        assert_eq!(set.factors(), ["Paris", "1900  Olympics"]);
    }

    #[test]
    fn factor_set_rejects_empty() {
        assert!(matches!(
            FactorSet::new(vec!["  ".to_string()]),
            Err(DomainError::EmptyFactorSet)
        ));
    }

    #[test]
    fn normalize_asqa_line() {
        let text = r#"{"question": "Who won?", "answers": ["Alice", "  ", "Bob"]}"#;
        let records = normalize_dataset(text, DatasetSource::Asqa).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].id, "q0001");
        assert_eq!(records[0].query, "Who won?");
        assert_eq!(records[0].references, ["Alice", "Bob"]);
        assert_eq!(records[0].source, DatasetSource::Asqa);
    }

    #[test]
    fn normalize_longfact_line_has_no_references() {
        let text = "{\"prompt\": \"Describe the Moon.\"}\n\n{\"prompt\": \"Describe Mars.\"}";
        let records = normalize_dataset(text, DatasetSource::Longfact).unwrap();
        assert_eq!(records.len(), 2);
        assert!(records[0].references.is_empty());
        assert_eq!(records[1].id, "q0003"); // ids derive from line numbers
    }

    #[test]
    fn normalize_custom_keeps_explicit_ids() {
        let text = r#"{"id": "x1", "query": "Q?", "references": ["r"]}"#;
        let records = normalize_dataset(text, DatasetSource::Custom).unwrap();
        assert_eq!(records[0].id, "x1");
    }

    #[test]
    fn normalize_reports_malformed_line_number() {
        let text = "{\"query\": \"ok\"}\nnot json";
        let err = normalize_dataset(text, DatasetSource::Custom).unwrap_err();
        match err {
            DomainError::DatasetLine { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn normalize_rejects_empty_dataset_and_duplicate_ids() {
        assert!(matches!(
            normalize_dataset("\n  \n", DatasetSource::Custom),
            Err(DomainError::EmptyDataset)
        ));
        let dup = "{\"id\": \"a\", \"query\": \"x\"}\n{\"id\": \"a\", \"query\": \"y\"}";
        assert!(matches!(
            normalize_dataset(dup, DatasetSource::Custom),
            Err(DomainError::DuplicateQueryId(id)) if id == "a"
        ));
    }

    #[test]
    fn normalize_rejects_whitespace_query() {
        let text = r#"{"query": "   "}"#;
        assert!(normalize_dataset(text, DatasetSource::Custom).is_err());
    }

    #[test]
    fn partition_splits_around_mean() {
        let p = Partition::from_confidences(&[0.9, 0.5, 0.7]).unwrap();
        assert!((p.threshold() - 0.7).abs() < 1e-12);
        assert_eq!(p.high(), [0, 2]); // 0.7 sits exactly on the threshold
        assert_eq!(p.low(), [1]);
        assert!(p.is_low(1));
        assert!(!p.is_low(2));
    }

    #[test]
    fn partition_all_equal_has_empty_low_group() {
        let p = Partition::from_confidences(&[0.4, 0.4, 0.4]).unwrap();
        assert_eq!(p.high().len(), 3);
        assert!(p.low().is_empty());
    }

    #[test]
    fn partition_rejects_empty_and_out_of_range() {
        assert!(Partition::from_confidences(&[]).is_err());
        assert!(Partition::from_confidences(&[0.5, 1.2]).is_err());
    }

    #[test]
    fn partition_deserialization_rejects_overlapping_groups() {
        let bad = r#"{"threshold": 0.5, "high": [0, 1], "low": [1]}"#;
        assert!(serde_json::from_str::<Partition>(bad).is_err());
        let good = r#"{"threshold": 0.5, "high": [0, 2], "low": [1]}"#;
        assert!(serde_json::from_str::<Partition>(good).is_ok());
    }

    #[test]
    fn jsonl_round_trip_carries_schema_tag() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        let records = vec![QueryRecord {
            id: "q1".to_string(),
            query: "Why?".to_string(),
            references: vec![],
            source: DatasetSource::Custom,
        }];
        write_jsonl(&path, QUERY_SCHEMA, &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(r#"{"schema":"factcal.query.v1""#), "got: {text}");
        let back: Vec<QueryRecord> = read_jsonl(&path, QUERY_SCHEMA).unwrap();
        assert_eq!(back, records);
        let err = read_jsonl::<QueryRecord>(&path, RESPONSE_SCHEMA).unwrap_err();
        assert!(matches!(err, DomainError::SchemaMismatch { .. }));
    }

    fn unit_score_strategy() -> impl Strategy<Value = UnitScore> {
        (0u32..=1_000_000).prop_map(|n| UnitScore::new(n as f64 / 1_000_000.0).unwrap())
    }

    fn fact_strategy() -> impl Strategy<Value = FactUnit> {
        (
            0usize..64,
            "[a-zA-Z0-9 .,]{1,40}",
            proptest::option::of(unit_score_strategy()),
            proptest::option::of(unit_score_strategy()),
            proptest::option::of(unit_score_strategy()),
            proptest::collection::vec(("[a-z]{1,12}", unit_score_strategy(), any::<bool>()), 0..3),
        )
            .prop_map(|(index, text, confidence, correctness, relevance, revs)| FactUnit {
                index,
                text,
                confidence,
                correctness,
                relevance,
                factors: None,
                revisions: revs
                    .into_iter()
                    .map(|(text, confidence, accepted)| Revision { text, confidence, accepted })
                    .collect(),
            })
    }

    proptest! {
        // One round-trip property covers the whole serialization layer:
        // ResponseRecord transitively exercises FactUnit, Revision, and
        // UnitScore in both directions.
        #[test]
        fn response_record_round_trips(
            query_id in "[a-z0-9]{1,10}",
            model_id in "[a-z0-9-]{1,16}",
            text in "[a-zA-Z0-9 .,]{0,80}",
            response_confidence in proptest::option::of(unit_score_strategy()),
            facts in proptest::collection::vec(fact_strategy(), 0..6),
        ) {
            let record = ResponseRecord { query_id, model_id, text, response_confidence, facts };
            let json = serde_json::to_string(&record).unwrap();
            let back: ResponseRecord = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(back, record);
        }
    }
}
