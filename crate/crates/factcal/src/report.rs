//! Report emission: calibration JSON, reliability table and SVG, confidence
//! distribution table, detection and judgment reports, self-correction
//! traces, and a JSON-structure flattener for schema-level golden checks.
//! Every write is atomic and byte-deterministic for fixed inputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::confix::ConfixTrace;
use crate::domain::ResponseRecord;
use crate::judge::{JudgmentSummary, VerdictLabel};
use crate::metrics::{
    reliability_histogram, CalibrationResult, DetectionReport, DistributionStats,
};
use crate::util::atomic_write;

pub const CALIBRATION_SCHEMA: &str = "factcal.calibration.v1";
pub const DETECTION_SCHEMA: &str = "factcal.detection.v1";
pub const JUDGMENTS_SCHEMA: &str = "factcal.judgments.v1";
pub const TRACE_SCHEMA: &str = "factcal.confix_trace.v1";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write `{}`: {source}", path.display())]
    Write { path: PathBuf, source: std::io::Error },
    #[error("cannot serialize {what}: {message}")]
    Serialize { what: &'static str, message: String },
}

fn write_json<T: Serialize>(path: &Path, what: &'static str, value: &T) -> Result<(), ReportError> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| ReportError::Serialize { what, message: e.to_string() })?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
        .map_err(|source| ReportError::Write { path: path.to_path_buf(), source })
}

fn write_text(path: &Path, text: &str) -> Result<(), ReportError> {
    atomic_write(path, text.as_bytes())
        .map_err(|source| ReportError::Write { path: path.to_path_buf(), source })
}

fn csv_field(value: &str) -> String {
    if value.contains([',', '"', '\n']) {
        format!("\"{}\"", value.replace('"', "\"\""))
    } else {
        value.to_string()
    }
}

fn csv_float(value: f64) -> String {
    // Shortest round-trip formatting: deterministic and lossless.
    format!("{value}")
}

fn csv_optional(value: Option<f64>) -> String {
    value.map(csv_float).unwrap_or_default()
}

/// Calibration at both granularities, as emitted to `calibration.json`.
/// `response_level` is absent when no response carried a whole-response
/// confidence score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationDocument {
    pub schema: String,
    pub manifest_id: String,
    pub model_id: String,
    pub estimator: String,
    pub fact_level: CalibrationResult,
    pub response_level: Option<CalibrationResult>,
}

/// Detection quality with its provenance, as emitted to `detection.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionDocument {
    pub schema: String,
    pub manifest_id: String,
    pub model_id: String,
    pub estimator: String,
    pub facts_evaluated: usize,
    #[serde(flatten)]
    pub report: DetectionReport,
}

/// One judged revision in `judgments.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgedRevision {
    pub query_id: String,
    pub fact_index: usize,
    pub original: String,
    pub revised: String,
    pub comparison: String,
    pub label: VerdictLabel,
}

/// Aggregate judgment ratios plus the individual verdicts, as emitted to
/// `judgments.json`. Percentages are absent when nothing was judged.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgmentsDocument {
    pub schema: String,
    pub manifest_id: String,
    pub improved_percent: Option<f64>,
    pub same_percent: Option<f64>,
    pub regressed_percent: Option<f64>,
    pub revised_count: usize,
    pub verdicts: Vec<JudgedRevision>,
}

impl JudgmentsDocument {
    pub fn new(
        manifest_id: &str,
        summary: &JudgmentSummary,
        verdicts: Vec<JudgedRevision>,
    ) -> Self {
        let percent = |ratio: Option<f64>| ratio.map(|r| r * 100.0);
        Self {
            schema: JUDGMENTS_SCHEMA.to_string(),
            manifest_id: manifest_id.to_string(),
            improved_percent: percent(summary.improved_ratio),
            same_percent: percent(summary.same_ratio),
            regressed_percent: percent(summary.regressed_ratio),
            revised_count: summary.revised_count,
            verdicts,
        }
    }
}

/// Writes every report file for one run into a single output directory.
pub struct ReportWriter {
    dir: PathBuf,
}

impl ReportWriter {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write_calibration(&self, document: &CalibrationDocument) -> Result<PathBuf, ReportError> {
        let path = self.dir.join("calibration.json");
        write_json(&path, "calibration report", document)?;
        Ok(path)
    }

    /// Reliability table: one row per bin per level, empty bins included
    /// with count 0 and empty mean cells.
    pub fn write_reliability_csv(
        &self,
        fact_level: &CalibrationResult,
        response_level: Option<&CalibrationResult>,
    ) -> Result<PathBuf, ReportError> {
        let mut rows =
            vec!["level,bin_index,lower,upper,midpoint,count,mean_confidence,mean_correctness"
                .to_string()];
        let mut push_level = |level: &str, result: &CalibrationResult| {
            for (index, bin) in result.bins.iter().enumerate() {
                rows.push(format!(
                    "{level},{index},{},{},{},{},{},{}",
                    csv_float(bin.lower),
                    csv_float(bin.upper),
                    csv_float((bin.lower + bin.upper) / 2.0),
                    bin.count,
                    csv_optional(bin.mean_confidence),
                    csv_optional(bin.mean_correctness),
                ));
            }
        };
        push_level("fact", fact_level);
        if let Some(response_level) = response_level {
            push_level("response", response_level);
        }
        let path = self.dir.join("reliability.csv");
        write_text(&path, &(rows.join("\n") + "\n"))?;
        Ok(path)
    }

    /// Hand-rolled reliability diagram for the fact level: one bar per
    /// populated bin at its mean correctness, over a dashed y = x diagonal.
    pub fn write_reliability_svg(
        &self,
        fact_level: &CalibrationResult,
    ) -> Result<PathBuf, ReportError> {
        let histogram = reliability_histogram(fact_level);
        let margin = 50.0;
        let plot = 400.0;
        let x = |v: f64| margin + v * plot;
        let y = |v: f64| margin + plot - v * plot;
        let mut svg = String::new();
        svg.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {0} {0}\" \
             font-family=\"sans-serif\" font-size=\"12\">\n",
            margin * 2.0 + plot
        ));
        svg.push_str(&format!(
            "  <rect x=\"{m:.1}\" y=\"{m:.1}\" width=\"{p:.1}\" height=\"{p:.1}\" \
             fill=\"none\" stroke=\"#333\"/>\n",
            m = margin,
            p = plot
        ));
        for tick in 0..=10 {
            let value = tick as f64 / 10.0;
            svg.push_str(&format!(
                "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{value:.1}</text>\n",
                x(value),
                margin + plot + 18.0
            ));
            svg.push_str(&format!(
                "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{value:.1}</text>\n",
                margin - 8.0,
                y(value) + 4.0
            ));
        }
        let bin_width = plot / fact_level.bins.len().max(1) as f64;
        for point in &histogram.points {
            let height = point.mean_correctness * plot;
            svg.push_str(&format!(
                "  <rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" \
                 fill=\"#4a90d9\" fill-opacity=\"0.8\" stroke=\"#2a5d94\"/>\n",
                x(point.midpoint) - bin_width / 2.0,
                y(point.mean_correctness),
                bin_width,
                height
            ));
        }
        let [(x0, y0), (x1, y1)] = histogram.diagonal;
        svg.push_str(&format!(
            "  <line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" \
             stroke=\"#c0392b\" stroke-dasharray=\"6,4\"/>\n",
            x(x0),
            y(y0),
            x(x1),
            y(y1)
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">mean confidence</text>\n",
            x(0.5),
            margin + plot + 38.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" \
             transform=\"rotate(-90 {0:.1} {1:.1})\">mean correctness</text>\n",
            14.0,
            y(0.5)
        ));
        svg.push_str("</svg>\n");
        let path = self.dir.join("reliability.svg");
        write_text(&path, &svg)?;
        Ok(path)
    }

    /// Per-response confidence distribution rows.
    pub fn write_distribution_csv(&self, stats: &DistributionStats) -> Result<PathBuf, ReportError> {
        let mut rows = vec![
            "query_id,fact_count,mean,max,min,variance,outlier_indices,response_confidence"
                .to_string(),
        ];
        for row in &stats.per_response {
            let outliers = row
                .outlier_indices
                .iter()
                .map(|index| index.to_string())
                .collect::<Vec<_>>()
                .join(";");
            rows.push(format!(
                "{},{},{},{},{},{},{},{}",
                csv_field(&row.query_id),
                row.fact_count,
                csv_float(row.mean),
                csv_float(row.max),
                csv_float(row.min),
                csv_float(row.variance),
                outliers,
                csv_optional(row.response_confidence),
            ));
        }
        let path = self.dir.join("distribution.csv");
        write_text(&path, &(rows.join("\n") + "\n"))?;
        Ok(path)
    }

    pub fn write_detection(&self, document: &DetectionDocument) -> Result<PathBuf, ReportError> {
        let path = self.dir.join("detection.json");
        write_json(&path, "detection report", document)?;
        Ok(path)
    }

    pub fn write_judgments(&self, document: &JudgmentsDocument) -> Result<PathBuf, ReportError> {
        let path = self.dir.join("judgments.json");
        write_json(&path, "judgment report", document)?;
        Ok(path)
    }

    /// One trace file per response, named by a sanitized query id.
    pub fn write_trace(&self, trace: &ConfixTrace) -> Result<PathBuf, ReportError> {
        let stem: String = trace
            .query_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        let path = self.dir.join("traces").join(format!("{stem}.json"));
        #[derive(Serialize)]
        struct TraceDocument<'a> {
            schema: &'static str,
            #[serde(flatten)]
            trace: &'a ConfixTrace,
        }
        write_json(&path, "trace", &TraceDocument { schema: TRACE_SCHEMA, trace })?;
        Ok(path)
    }

    pub fn write_responses(
        &self,
        file_name: &str,
        responses: &[ResponseRecord],
    ) -> Result<PathBuf, ReportError> {
        let path = self.dir.join(file_name);
        crate::domain::write_jsonl(&path, crate::domain::RESPONSE_SCHEMA, responses).map_err(
            |e| ReportError::Serialize { what: "response records", message: e.to_string() },
        )?;
        Ok(path)
    }
}

/// Flattens a JSON document to its structure: sorted `path: type` lines,
/// with objects recursed, arrays marked `[]` and probed via their first
/// element. Two documents with the same flattening have the same shape
/// regardless of values.
pub fn json_structure(value: &Value) -> String {
    fn type_name(value: &Value) -> &'static str {
        match value {
            Value::Null => "null",
            Value::Bool(_) => "boolean",
            Value::Number(_) => "number",
            Value::String(_) => "string",
            Value::Array(_) => "[]",
            Value::Object(_) => "{}",
        }
    }
    fn walk(value: &Value, path: &str, lines: &mut Vec<String>) {
        match value {
            Value::Object(map) => {
                if map.is_empty() {
                    lines.push(format!("{path}: {{}}"));
                }
                for (key, child) in map {
                    walk(child, &format!("{path}.{key}"), lines);
                }
            }
            Value::Array(items) => {
                lines.push(format!("{path}: []"));
                if let Some(first) = items.first() {
                    walk(first, &format!("{path}[]"), lines);
                }
            }
            other => lines.push(format!("{path}: {}", type_name(other))),
        }
    }
    let mut lines = Vec::new();
    walk(value, "$", &mut lines);
    lines.sort();
    let mut text = lines.join("\n");
    text.push('\n');
    text
}
