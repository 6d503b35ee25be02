//! Command orchestration: wires backends, templates, and the grading oracle
//! from a validated [`RunConfig`], runs the pipeline stages with bounded
//! parallelism, and stamps every output directory with a manifest — on
//! failures too, so partial runs stay inspectable.
//!
//! Failure policy: anything wrong with the configuration aborts before any
//! backend call (exit 1). Once stages run, per-item problems (a response
//! whose facts cannot be parsed out, a fact the oracle cannot grade, an
//! estimate that fails) degrade that item and are counted in the manifest,
//! while systemic problems (transport failures outside estimation, broken
//! scripts, unwritable outputs) abort the stage with partial outputs on disk
//! (exit 2).

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    BackendHandle, CachedBackend, CompletionRequest, HttpBackend, Message, MockBackend,
};
use crate::config::{
    unix_now, BackendConfig, BackendKind, ConfigError, GradingOracleKind, RunConfig, RunManifest,
};
use crate::confix::{ConfixConfig, ConfixTrace, FactOutcome};
use crate::domain::{
    normalize_dataset, read_jsonl, FactUnit, Partition, QueryRecord, ResponseRecord, UnitScore,
    FACT_ROW_SCHEMA, RESPONSE_SCHEMA,
};
use crate::estimators::{estimate_fact_confidence, estimate_response_confidence, EstimatorBackends};
use crate::extraction::{extract_facts, ExtractionError};
use crate::grading::{grade_correctness, grade_relevance, FixtureGrades, GradingError, GradingOracle};
use crate::judge::{aggregate_judgments, judge_revision};
use crate::metrics::{
    detection_metrics, distribution_stats, f_ece, response_ece, BinningConfig,
};
use crate::prompts::TemplateSet;
use crate::report::{
    CalibrationDocument, DetectionDocument, JudgedRevision, JudgmentsDocument, ReportWriter,
    CALIBRATION_SCHEMA, DETECTION_SCHEMA,
};
use crate::util::{atomic_write, parallel_map};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{stage} stage: {message}")]
    Stage { stage: &'static str, message: String },
}

impl PipelineError {
    /// Process exit code: 1 for configuration problems caught before any
    /// backend work, 2 for stage failures that may leave partial outputs.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 1,
            Self::Stage { .. } => 2,
        }
    }
}

fn stage_error(stage: &'static str, message: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage { stage, message: message.to_string() }
}

/// One flat fact row as emitted to `facts.jsonl` by the extract command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactRow {
    pub query_id: String,
    pub fact_index: usize,
    pub text: String,
}

/// Everything a command needs once the configuration has been validated.
struct StageContext {
    config: RunConfig,
    templates: TemplateSet,
    subject: BackendHandle,
    tool: BackendHandle,
    judge: BackendHandle,
    oracle: Option<GradingOracle>,
    writer: ReportWriter,
    manifest: RunManifest,
}

fn build_backend(role: &str, config: &BackendConfig, cache: &crate::config::CacheConfig)
    -> Result<BackendHandle, PipelineError>
{
    let inner: BackendHandle = match config.kind {
        BackendKind::Mock => {
            let script = config.script.as_ref().expect("validated: mock backends carry a script");
            Arc::new(MockBackend::from_script_file(script).map_err(|e| {
                PipelineError::Config(ConfigError::Invalid(format!("{role} backend: {e}")))
            })?)
        }
        BackendKind::Http => {
            let backend = match &config.endpoint {
                Some(endpoint) => {
                    HttpBackend::new(endpoint, std::env::var(crate::backend::http::TOKEN_ENV).ok())
                }
                None => HttpBackend::from_env(),
            }
            .map_err(|e| {
                PipelineError::Config(ConfigError::Invalid(format!("{role} backend: {e}")))
            })?;
            Arc::new(backend)
        }
    };
    Ok(match &cache.dir {
        // Per-role subdirectories keep two identically-named backends (e.g.
        // two mocks with different scripts) from sharing cache entries.
        Some(dir) => Arc::new(CachedBackend::new(inner, dir.join(role), cache.mode)),
        None => inner,
    })
}

fn build_oracle(config: &RunConfig, judge: &BackendHandle)
    -> Result<Option<GradingOracle>, PipelineError>
{
    let Some(grading) = &config.grading else { return Ok(None) };
    Ok(Some(match grading.oracle {
        GradingOracleKind::ReferenceMatch => GradingOracle::ReferenceMatch,
        GradingOracleKind::Judge => GradingOracle::JudgeBackend {
            backend: judge.clone(),
            model_id: config.judge.model_id.clone(),
        },
        GradingOracleKind::Fixture => {
            let path = grading.fixture_path.as_ref().expect("validated: fixture oracle has a path");
            GradingOracle::Fixture(FixtureGrades::from_file(path).map_err(|e| {
                PipelineError::Config(ConfigError::Invalid(format!("grading fixture: {e}")))
            })?)
        }
    }))
}

impl StageContext {
    fn new(command: &str, config: RunConfig) -> Result<Self, PipelineError> {
        let manifest_id = config.manifest_id()?;
        let templates = match &config.prompt_overrides {
            Some(dir) => TemplateSet::with_overrides(dir).map_err(|e| {
                PipelineError::Config(ConfigError::Invalid(format!("prompt overrides: {e}")))
            })?,
            None => TemplateSet::builtin(),
        };
        let subject = build_backend("subject", &config.subject, &config.cache)?;
        let tool = build_backend("tool", &config.tool, &config.cache)?;
        let judge = build_backend("judge", &config.judge, &config.cache)?;
        let oracle = build_oracle(&config, &judge)?;
        let writer = ReportWriter::new(config.output_dir.join(&manifest_id));
        let manifest = RunManifest::new(command, manifest_id, config.clone());
        Ok(Self { config, templates, subject, tool, judge, oracle, writer, manifest })
    }

    fn estimator_backends(&self) -> EstimatorBackends<'_> {
        EstimatorBackends {
            subject: self.subject.as_ref(),
            tool: self.tool.as_ref(),
            subject_model: &self.config.subject.model_id,
            tool_model: &self.config.tool.model_id,
        }
    }

    /// Stamps the manifest (with the failure, if any) and hands back the
    /// output directory on success.
    fn finalize(mut self, outcome: Result<(), PipelineError>) -> Result<PathBuf, PipelineError> {
        self.manifest.finished_unix_secs = unix_now();
        if let Err(error) = &outcome {
            self.manifest.error = Some(error.to_string());
        }
        let mut bytes = serde_json::to_vec_pretty(&self.manifest)
            .map_err(|e| stage_error("manifest", e))?;
        bytes.push(b'\n');
        let path = self.writer.dir().join("manifest.json");
        atomic_write(&path, &bytes).map_err(|e| stage_error("manifest", e))?;
        outcome?;
        Ok(self.writer.dir().to_path_buf())
    }
}

fn load_queries(ctx: &StageContext) -> Result<Vec<QueryRecord>, PipelineError> {
    let text = std::fs::read_to_string(&ctx.config.dataset.path)
        .map_err(|e| stage_error("dataset", e))?;
    normalize_dataset(&text, ctx.config.dataset.source).map_err(|e| stage_error("dataset", e))
}

/// Loads the configured responses file (which must pair 1:1 with the
/// dataset) or generates responses from the subject backend at temperature
/// zero. The result is ordered like the dataset.
fn load_or_generate_responses(
    ctx: &mut StageContext,
    queries: &[QueryRecord],
) -> Result<Vec<ResponseRecord>, PipelineError> {
    let responses = match &ctx.config.responses {
        Some(path) => {
            let records: Vec<ResponseRecord> =
                read_jsonl(path, RESPONSE_SCHEMA).map_err(|e| stage_error("responses", e))?;
            let known: HashSet<&str> = queries.iter().map(|q| q.id.as_str()).collect();
            let mut by_id: HashMap<String, ResponseRecord> = HashMap::new();
            for record in records {
                if !known.contains(record.query_id.as_str()) {
                    return Err(stage_error(
                        "responses",
                        format!("response for unknown query `{}`", record.query_id),
                    ));
                }
                let id = record.query_id.clone();
                if by_id.insert(id.clone(), record).is_some() {
                    return Err(stage_error(
                        "responses",
                        format!("duplicate response for query `{id}`"),
                    ));
                }
            }
            queries
                .iter()
                .map(|query| {
                    by_id.remove(&query.id).ok_or_else(|| {
                        stage_error(
                            "responses",
                            format!("no response for query `{}`", query.id),
                        )
                    })
                })
                .collect::<Result<Vec<_>, _>>()?
        }
        None => {
            eprintln!("[factcal] generating {} responses", queries.len());
            let results = parallel_map(queries, ctx.config.parallelism, |_, query| {
                let request = CompletionRequest::new(
                    &ctx.config.subject.model_id,
                    vec![Message::user(&query.query)],
                )
                .with_seed(ctx.config.seed);
                ctx.subject.complete(&request).map(|completion| ResponseRecord {
                    query_id: query.id.clone(),
                    model_id: ctx.config.subject.model_id.clone(),
                    text: completion.text,
                    response_confidence: None,
                    facts: Vec::new(),
                })
            });
            results
                .into_iter()
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| stage_error("generate", e))?
        }
    };
    ctx.manifest.counts.responses = responses.len();
    Ok(responses)
}

/// Decomposes each response into atomic facts using the tool backend.
/// Responses that already carry facts are left alone, so pre-extracted
/// files pass through unchanged. A response whose output cannot be parsed
/// into facts (or that is empty) is kept with zero facts and counted.
fn extract_stage(
    ctx: &mut StageContext,
    queries: &[QueryRecord],
    responses: &mut [ResponseRecord],
) -> Result<(), PipelineError> {
    let pending: Vec<usize> =
        (0..responses.len()).filter(|&i| responses[i].facts.is_empty()).collect();
    if !pending.is_empty() {
        eprintln!("[factcal] extracting facts from {} responses", pending.len());
    }
    let results = {
        let jobs: Vec<(&QueryRecord, &ResponseRecord)> =
            pending.iter().map(|&i| (&queries[i], &responses[i])).collect();
        parallel_map(&jobs, ctx.config.parallelism, |_, &(query, response)| {
            extract_facts(
                ctx.tool.as_ref(),
                &ctx.templates,
                &ctx.config.tool.model_id,
                &query.query,
                &response.text,
            )
        })
    };
    for (&slot, result) in pending.iter().zip(results) {
        match result {
            Ok(facts) => {
                responses[slot].facts =
                    facts.into_iter().enumerate().map(|(i, text)| FactUnit::new(i, text)).collect();
            }
            Err(
                error @ (ExtractionError::EmptyResponse | ExtractionError::UnparseableFacts { .. }),
            ) => {
                eprintln!(
                    "[factcal] warning: no facts for query `{}`: {error}",
                    responses[slot].query_id
                );
                ctx.manifest.counts.extraction_failures += 1;
            }
            Err(error) => return Err(stage_error("extract", error)),
        }
    }
    ctx.manifest.counts.facts = responses.iter().map(|r| r.facts.len()).sum();
    Ok(())
}

enum FactGrade {
    Keep,
    Scored { correctness: UnitScore, relevance: UnitScore },
    Excluded(String),
}

/// Grades correctness and relevance for every fact that is not already
/// graded. Facts the oracle cannot grade stay unscored and are counted as
/// exclusions; transport failures abort.
fn grade_stage(
    ctx: &mut StageContext,
    queries: &[QueryRecord],
    responses: &mut [ResponseRecord],
) -> Result<(), PipelineError> {
    let Some(oracle) = &ctx.oracle else { return Ok(()) };
    eprintln!("[factcal] grading {} facts", ctx.manifest.counts.facts);
    let results = {
        let jobs: Vec<(&QueryRecord, &ResponseRecord)> =
            queries.iter().zip(responses.iter()).collect();
        parallel_map(&jobs, ctx.config.parallelism, |_, &(query, response)| {
            let mut grades = Vec::with_capacity(response.facts.len());
            for fact in &response.facts {
                if fact.correctness.is_some() && fact.relevance.is_some() {
                    grades.push(FactGrade::Keep);
                    continue;
                }
                let graded = grade_correctness(oracle, &ctx.templates, query, fact.index, &fact.text)
                    .and_then(|correctness| {
                        let relevance = grade_relevance(
                            oracle,
                            &ctx.templates,
                            query,
                            &response.text,
                            fact.index,
                            &fact.text,
                        )?;
                        Ok((correctness, relevance))
                    });
                match graded {
                    Ok((correctness, relevance)) => {
                        grades.push(FactGrade::Scored { correctness, relevance });
                    }
                    Err(error @ (GradingError::Backend(_) | GradingError::Prompt(_))) => {
                        return Err(error);
                    }
                    Err(error) => grades.push(FactGrade::Excluded(error.to_string())),
                }
            }
            Ok(grades)
        })
    };
    for (response, result) in responses.iter_mut().zip(results) {
        let grades = result.map_err(|e| stage_error("grade", e))?;
        for (fact, grade) in response.facts.iter_mut().zip(grades) {
            match grade {
                FactGrade::Keep => {}
                FactGrade::Scored { correctness, relevance } => {
                    fact.correctness = Some(correctness);
                    fact.relevance = Some(relevance);
                }
                FactGrade::Excluded(reason) => {
                    eprintln!(
                        "[factcal] warning: fact {} of query `{}` not graded: {reason}",
                        fact.index, response.query_id
                    );
                    ctx.manifest.counts.grading_exclusions += 1;
                }
            }
        }
    }
    Ok(())
}

struct EstimateOutcome {
    fact_scores: Vec<(usize, UnitScore)>,
    fact_failures: usize,
    response_confidence: Option<UnitScore>,
    response_failures: usize,
}

/// Estimates confidence for every fact (and the whole response) that does
/// not already carry a score. Individual estimate failures leave holes and
/// are counted rather than aborting the run.
fn estimate_stage(
    ctx: &mut StageContext,
    queries: &[QueryRecord],
    responses: &mut [ResponseRecord],
) -> Result<(), PipelineError> {
    let estimator = ctx.config.estimator_config()?;
    let backends = ctx.estimator_backends();
    eprintln!(
        "[factcal] estimating confidence ({})",
        ctx.config.estimator.method
    );
    let results = {
        let jobs: Vec<(&QueryRecord, &ResponseRecord)> =
            queries.iter().zip(responses.iter()).collect();
        parallel_map(&jobs, ctx.config.parallelism, |_, &(query, response)| {
            let mut outcome = EstimateOutcome {
                fact_scores: Vec::new(),
                fact_failures: 0,
                response_confidence: None,
                response_failures: 0,
            };
            for (position, fact) in response.facts.iter().enumerate() {
                if fact.confidence.is_some() {
                    continue;
                }
                match estimate_fact_confidence(
                    &estimator,
                    &backends,
                    &ctx.templates,
                    &query.query,
                    &response.text,
                    &fact.text,
                ) {
                    Ok(score) => outcome.fact_scores.push((position, score)),
                    Err(error) => {
                        eprintln!(
                            "[factcal] warning: no confidence for fact {} of query `{}`: {error}",
                            fact.index, response.query_id
                        );
                        outcome.fact_failures += 1;
                    }
                }
            }
            if response.response_confidence.is_none() {
                match estimate_response_confidence(
                    &backends,
                    &ctx.templates,
                    &query.query,
                    &response.text,
                ) {
                    Ok(score) => outcome.response_confidence = Some(score),
                    Err(error) => {
                        eprintln!(
                            "[factcal] warning: no response confidence for query `{}`: {error}",
                            response.query_id
                        );
                        outcome.response_failures += 1;
                    }
                }
            }
            outcome
        })
    };
    for (response, outcome) in responses.iter_mut().zip(results) {
        for (position, score) in outcome.fact_scores {
            response.facts[position].confidence = Some(score);
        }
        if let Some(score) = outcome.response_confidence {
            response.response_confidence = Some(score);
        }
        ctx.manifest.counts.estimator_failures += outcome.fact_failures + outcome.response_failures;
    }
    Ok(())
}

/// Pairs each scored-and-graded fact's low-group membership (the detector's
/// "flagged" prediction) with whether the fact is actually erroneous
/// (correctness below one half). The partition is computed per response over
/// the facts that carry confidence, exactly as the correction loop sees it.
pub fn detection_pairs(responses: &[ResponseRecord]) -> (Vec<bool>, Vec<bool>) {
    let mut flagged = Vec::new();
    let mut erroneous = Vec::new();
    for response in responses {
        let scored: Vec<(usize, f64)> = response
            .facts
            .iter()
            .enumerate()
            .filter_map(|(position, fact)| Some((position, fact.confidence?.value())))
            .collect();
        if scored.is_empty() {
            continue;
        }
        let confidences: Vec<f64> = scored.iter().map(|&(_, value)| value).collect();
        let partition = Partition::from_confidences(&confidences)
            .expect("validated scores form a valid partition input");
        let low: HashSet<usize> = partition.low().iter().copied().collect();
        for (scored_position, &(fact_position, _)) in scored.iter().enumerate() {
            let Some(correctness) = response.facts[fact_position].correctness else { continue };
            flagged.push(low.contains(&scored_position));
            erroneous.push(correctness.value() < 0.5);
        }
    }
    (flagged, erroneous)
}

fn binning_config(ctx: &StageContext) -> Result<BinningConfig, PipelineError> {
    BinningConfig::new(ctx.config.binning.bin_count).map_err(|e| stage_error("metrics", e))
}

/// Emits calibration.json, reliability.csv, reliability.svg, and
/// distribution.csv from scored responses.
fn emit_calibration_reports(
    ctx: &mut StageContext,
    responses: &[ResponseRecord],
) -> Result<(), PipelineError> {
    let binning = binning_config(ctx)?;
    let fact_level = f_ece(responses, &binning).map_err(|e| stage_error("metrics", e))?;
    ctx.manifest.counts.degenerate_responses = fact_level.excluded_responses;
    let response_level = response_ece(responses, &binning).ok();
    let document = CalibrationDocument {
        schema: CALIBRATION_SCHEMA.to_string(),
        manifest_id: ctx.manifest.manifest_id.clone(),
        model_id: ctx.config.subject.model_id.clone(),
        estimator: ctx.config.estimator.method.clone(),
        fact_level,
        response_level,
    };
    ctx.writer.write_calibration(&document).map_err(|e| stage_error("report", e))?;
    ctx.writer
        .write_reliability_csv(&document.fact_level, document.response_level.as_ref())
        .map_err(|e| stage_error("report", e))?;
    ctx.writer.write_reliability_svg(&document.fact_level).map_err(|e| stage_error("report", e))?;
    let stats = distribution_stats(responses);
    ctx.writer.write_distribution_csv(&stats).map_err(|e| stage_error("report", e))?;
    Ok(())
}

/// Emits detection.json when any fact carries both confidence and
/// correctness; otherwise says why on stderr and writes nothing.
fn emit_detection_report(
    ctx: &mut StageContext,
    responses: &[ResponseRecord],
) -> Result<(), PipelineError> {
    let (flagged, erroneous) = detection_pairs(responses);
    if flagged.is_empty() {
        eprintln!("[factcal] no graded-and-scored facts; skipping the detection report");
        return Ok(());
    }
    let report = detection_metrics(&flagged, &erroneous).map_err(|e| stage_error("metrics", e))?;
    let document = DetectionDocument {
        schema: DETECTION_SCHEMA.to_string(),
        manifest_id: ctx.manifest.manifest_id.clone(),
        model_id: ctx.config.subject.model_id.clone(),
        estimator: ctx.config.estimator.method.clone(),
        facts_evaluated: flagged.len(),
        report,
    };
    ctx.writer.write_detection(&document).map_err(|e| stage_error("report", e))?;
    Ok(())
}

fn write_scored_responses(
    ctx: &StageContext,
    responses: &[ResponseRecord],
) -> Result<(), PipelineError> {
    ctx.writer
        .write_responses("responses.jsonl", responses)
        .map(|_| ())
        .map_err(|e| stage_error("write", e))
}

fn extract_inner(ctx: &mut StageContext) -> Result<(), PipelineError> {
    let queries = load_queries(ctx)?;
    let mut responses = load_or_generate_responses(ctx, &queries)?;
    extract_stage(ctx, &queries, &mut responses)?;
    write_scored_responses(ctx, &responses)?;
    let rows: Vec<FactRow> = responses
        .iter()
        .flat_map(|response| {
            response.facts.iter().map(|fact| FactRow {
                query_id: response.query_id.clone(),
                fact_index: fact.index,
                text: fact.text.clone(),
            })
        })
        .collect();
    crate::domain::write_jsonl(&ctx.writer.dir().join("facts.jsonl"), FACT_ROW_SCHEMA, &rows)
        .map_err(|e| stage_error("write", e))?;
    Ok(())
}

/// Runs extract → grade → estimate and returns the scored responses.
fn score_responses(ctx: &mut StageContext) -> Result<(Vec<QueryRecord>, Vec<ResponseRecord>), PipelineError> {
    let queries = load_queries(ctx)?;
    let mut responses = load_or_generate_responses(ctx, &queries)?;
    extract_stage(ctx, &queries, &mut responses)?;
    grade_stage(ctx, &queries, &mut responses)?;
    estimate_stage(ctx, &queries, &mut responses)?;
    Ok((queries, responses))
}

fn calibrate_inner(ctx: &mut StageContext) -> Result<(), PipelineError> {
    let (_, responses) = score_responses(ctx)?;
    write_scored_responses(ctx, &responses)?;
    emit_calibration_reports(ctx, &responses)
}

fn confix_inner(ctx: &mut StageContext) -> Result<(), PipelineError> {
    let (queries, responses) = score_responses(ctx)?;
    write_scored_responses(ctx, &responses)?;
    emit_detection_report(ctx, &responses)?;

    eprintln!("[factcal] correcting low-confidence facts");
    let confix_config = ConfixConfig {
        max_iterations: ctx.config.confix.max_iterations,
        include_reference_scores: ctx.config.confix.include_reference_scores,
        estimator: ctx.config.estimator_config()?,
    };
    let backends = ctx.estimator_backends();
    let results = {
        let jobs: Vec<(&QueryRecord, &ResponseRecord)> =
            queries.iter().zip(responses.iter()).collect();
        parallel_map(&jobs, ctx.config.parallelism, |_, &(query, response)| {
            crate::confix::run_confix(&confix_config, &backends, &ctx.templates, query, response)
        })
    };
    let mut revised_responses = Vec::with_capacity(responses.len());
    let mut traces = Vec::with_capacity(responses.len());
    for result in results {
        let (revised, trace) = result.map_err(|e| stage_error("confix", e))?;
        revised_responses.push(revised);
        traces.push(trace);
    }
    ctx.manifest.counts.corrections_accepted = traces
        .iter()
        .flat_map(|trace| &trace.fact_logs)
        .filter(|log| log.outcome == FactOutcome::Accepted)
        .count();
    for trace in &traces {
        ctx.writer.write_trace(trace).map_err(|e| stage_error("write", e))?;
    }
    ctx.writer
        .write_responses("revised_responses.jsonl", &revised_responses)
        .map_err(|e| stage_error("write", e))?;

    judge_accepted_revisions(ctx, &queries, &revised_responses, &traces)
}

/// Judges every accepted revision against its original wording and emits
/// judgments.json.
fn judge_accepted_revisions(
    ctx: &mut StageContext,
    queries: &[QueryRecord],
    revised_responses: &[ResponseRecord],
    traces: &[ConfixTrace],
) -> Result<(), PipelineError> {
    let mut verdicts = Vec::new();
    let mut rows = Vec::new();
    for ((query, response), trace) in queries.iter().zip(revised_responses).zip(traces) {
        let all_facts: Vec<String> =
            response.facts.iter().map(|fact| fact.text.clone()).collect();
        for log in &trace.fact_logs {
            if log.outcome != FactOutcome::Accepted {
                continue;
            }
            let revised_fact = response
                .facts
                .iter()
                .find(|fact| fact.index == log.fact_index)
                .ok_or_else(|| {
                    stage_error("judge", format!("accepted fact {} vanished", log.fact_index))
                })?;
            let verdict = judge_revision(
                ctx.judge.as_ref(),
                &ctx.templates,
                &ctx.config.judge.model_id,
                &query.query,
                &response.text,
                &all_facts,
                &log.original_text,
                &revised_fact.text,
            )
            .map_err(|e| stage_error("judge", e))?;
            rows.push(JudgedRevision {
                query_id: response.query_id.clone(),
                fact_index: log.fact_index,
                original: log.original_text.clone(),
                revised: revised_fact.text.clone(),
                comparison: verdict.comparison.clone(),
                label: verdict.label,
            });
            verdicts.push(verdict);
        }
    }
    ctx.manifest.counts.judged_revisions = verdicts.len();
    let summary = aggregate_judgments(&verdicts);
    let document = JudgmentsDocument::new(&ctx.manifest.manifest_id, &summary, rows);
    ctx.writer.write_judgments(&document).map_err(|e| stage_error("report", e))?;
    Ok(())
}

fn judge_inner(
    ctx: &mut StageContext,
    original_path: &Path,
    revised_path: &Path,
) -> Result<(), PipelineError> {
    let queries = load_queries(ctx)?;
    let queries_by_id: HashMap<&str, &QueryRecord> =
        queries.iter().map(|query| (query.id.as_str(), query)).collect();
    let originals: Vec<ResponseRecord> =
        read_jsonl(original_path, RESPONSE_SCHEMA).map_err(|e| stage_error("judge", e))?;
    let revised: Vec<ResponseRecord> =
        read_jsonl(revised_path, RESPONSE_SCHEMA).map_err(|e| stage_error("judge", e))?;
    let revised_by_id: HashMap<&str, &ResponseRecord> =
        revised.iter().map(|response| (response.query_id.as_str(), response)).collect();

    ctx.manifest.counts.responses = originals.len();
    let mut verdicts = Vec::new();
    let mut rows = Vec::new();
    for original in &originals {
        let query = queries_by_id.get(original.query_id.as_str()).ok_or_else(|| {
            stage_error("judge", format!("query `{}` is not in the dataset", original.query_id))
        })?;
        let revised_response = revised_by_id.get(original.query_id.as_str()).ok_or_else(|| {
            stage_error("judge", format!("no revised response for query `{}`", original.query_id))
        })?;
        let all_facts: Vec<String> =
            revised_response.facts.iter().map(|fact| fact.text.clone()).collect();
        for original_fact in &original.facts {
            let Some(revised_fact) =
                revised_response.facts.iter().find(|fact| fact.index == original_fact.index)
            else {
                continue;
            };
            if original_fact.text == revised_fact.text {
                continue;
            }
            let verdict = judge_revision(
                ctx.judge.as_ref(),
                &ctx.templates,
                &ctx.config.judge.model_id,
                &query.query,
                &revised_response.text,
                &all_facts,
                &original_fact.text,
                &revised_fact.text,
            )
            .map_err(|e| stage_error("judge", e))?;
            rows.push(JudgedRevision {
                query_id: original.query_id.clone(),
                fact_index: original_fact.index,
                original: original_fact.text.clone(),
                revised: revised_fact.text.clone(),
                comparison: verdict.comparison.clone(),
                label: verdict.label,
            });
            verdicts.push(verdict);
        }
    }
    ctx.manifest.counts.judged_revisions = verdicts.len();
    let summary = aggregate_judgments(&verdicts);
    let document = JudgmentsDocument::new(&ctx.manifest.manifest_id, &summary, rows);
    ctx.writer.write_judgments(&document).map_err(|e| stage_error("report", e))?;
    Ok(())
}

fn report_inner(ctx: &mut StageContext) -> Result<(), PipelineError> {
    let Some(path) = ctx.config.responses.clone() else {
        return Err(PipelineError::Config(ConfigError::Invalid(
            "the report command needs a scored responses file (config key `responses` or --responses)"
                .to_string(),
        )));
    };
    let responses: Vec<ResponseRecord> =
        read_jsonl(&path, RESPONSE_SCHEMA).map_err(|e| stage_error("responses", e))?;
    ctx.manifest.counts.responses = responses.len();
    ctx.manifest.counts.facts = responses.iter().map(|r| r.facts.len()).sum();
    emit_calibration_reports(ctx, &responses)?;
    emit_detection_report(ctx, &responses)
}

/// Decompose responses into atomic facts and write `facts.jsonl`.
pub fn cmd_extract(config: RunConfig) -> Result<PathBuf, PipelineError> {
    let mut ctx = StageContext::new("extract", config)?;
    let outcome = extract_inner(&mut ctx);
    ctx.finalize(outcome)
}

/// Grade, estimate confidence, and write the calibration reports.
pub fn cmd_calibrate(config: RunConfig) -> Result<PathBuf, PipelineError> {
    let mut ctx = StageContext::new("calibrate", config)?;
    let outcome = calibrate_inner(&mut ctx);
    ctx.finalize(outcome)
}

/// Run the confidence-guided correction loop; write detection, traces,
/// revised responses, and judgments.
pub fn cmd_confix(config: RunConfig) -> Result<PathBuf, PipelineError> {
    let mut ctx = StageContext::new("confix", config)?;
    let outcome = confix_inner(&mut ctx);
    ctx.finalize(outcome)
}

/// Judge revised facts in `revised_path` against their originals in
/// `original_path`, paired by query id and fact index.
pub fn cmd_judge(
    config: RunConfig,
    original_path: &Path,
    revised_path: &Path,
) -> Result<PathBuf, PipelineError> {
    let mut ctx = StageContext::new("judge", config)?;
    let outcome = judge_inner(&mut ctx, original_path, revised_path);
    ctx.finalize(outcome)
}

/// Recompute every offline report from an already-scored responses file;
/// no backend is called.
pub fn cmd_report(config: RunConfig) -> Result<PathBuf, PipelineError> {
    let mut ctx = StageContext::new("report", config)?;
    let outcome = report_inner(&mut ctx);
    ctx.finalize(outcome)
}
