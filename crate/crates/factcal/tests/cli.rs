//! End-to-end tests of the command-line binary: exit codes, the extract /
//! judge / report subcommands, failure manifests, and warm-cache reruns.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn factcal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_factcal"))
        .args(args)
        .output()
        .expect("the factcal binary runs")
}

/// Runs a subcommand against the fixture config, expecting success, and
/// returns the single run directory created under `output_dir`.
fn run_ok(subcommand: &str, output_dir: &Path, extra: &[&str]) -> PathBuf {
    let config = fixture("run.toml");
    let mut args = vec![
        subcommand,
        "--config",
        config.to_str().unwrap(),
        "--output-dir",
        output_dir.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    let output = factcal(&args);
    assert!(
        output.status.success(),
        "`factcal {subcommand}` failed:\n{}",
        String::from_utf8_lossy(&output.stderr)
    );
    single_subdir(output_dir)
}

fn single_subdir(dir: &Path) -> PathBuf {
    let mut entries: Vec<PathBuf> =
        fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(entries.len(), 1, "expected exactly one run directory in {}", dir.display());
    entries.remove(0)
}

fn read_json(path: &Path) -> Value {
    let text = fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()));
    serde_json::from_str(&text)
        .unwrap_or_else(|e| panic!("{} is not valid JSON: {e}", path.display()))
}

#[test]
fn extract_writes_flat_fact_rows_and_scoreless_responses() {
    let out = tempfile::tempdir().unwrap();
    let run_dir = run_ok("extract", out.path(), &[]);

    let facts = fs::read_to_string(run_dir.join("facts.jsonl")).unwrap();
    let rows: Vec<Value> =
        facts.lines().map(|line| serde_json::from_str(line).unwrap()).collect();
    assert_eq!(rows.len(), 8, "the fixture corpus decomposes into eight facts");
    assert_eq!(rows[0]["query_id"], "qA");
    assert_eq!(rows[0]["fact_index"], 0);
    assert_eq!(rows[0]["text"], "Paris is the capital of France.");
    let per_query = |id: &str| rows.iter().filter(|row| row["query_id"] == id).count();
    assert_eq!(per_query("qA"), 2);
    assert_eq!(per_query("qB"), 5);
    assert_eq!(per_query("qC"), 1);
    assert_eq!(per_query("qD"), 0, "a response with no extractable facts contributes no rows");

    // Extraction alone grades and estimates nothing.
    let responses = fs::read_to_string(run_dir.join("responses.jsonl")).unwrap();
    let first: Value = serde_json::from_str(responses.lines().next().unwrap()).unwrap();
    assert!(first["facts"][0].get("confidence").is_none());
    assert!(first["facts"][0].get("correctness").is_none());
}

#[test]
fn report_recomputes_metrics_from_a_scored_responses_file() {
    let out = tempfile::tempdir().unwrap();
    let scored = golden("calibrate/responses.jsonl");
    let run_dir = run_ok("report", out.path(), &["--responses", scored.to_str().unwrap()]);

    let calibration = read_json(&run_dir.join("calibration.json"));
    assert_eq!(calibration["fact_level"]["ece"], 0.030000000000000027);
    assert_eq!(calibration["fact_level"]["included_responses"], 3);
    assert_eq!(calibration["fact_level"]["excluded_responses"], 1);

    let detection = read_json(&run_dir.join("detection.json"));
    assert_eq!(detection["accuracy"], 0.875);
    assert_eq!(detection["confusion"]["tp"], 2);
    assert_eq!(detection["confusion"]["fn"], 1);
}

#[test]
fn judge_pairs_original_and_revised_files_by_query_and_fact() {
    let out = tempfile::tempdir().unwrap();
    let original = golden("confix/responses.jsonl");
    let revised = golden("confix/revised_responses.jsonl");
    let run_dir = run_ok(
        "judge",
        out.path(),
        &["--original", original.to_str().unwrap(), "--revised", revised.to_str().unwrap()],
    );

    let judgments = read_json(&run_dir.join("judgments.json"));
    // Only qA fact 1 differs between the two files; rejected revisions on qB
    // never changed the shipped fact text, so they are not judged.
    assert_eq!(judgments["revised_count"], 1);
    assert_eq!(judgments["improved_percent"], 100.0);
    assert_eq!(judgments["verdicts"][0]["query_id"], "qA");
    assert_eq!(judgments["verdicts"][0]["fact_index"], 1);
    assert_eq!(judgments["verdicts"][0]["label"], "improved");
}

#[test]
fn a_missing_config_file_is_a_configuration_error() {
    let output = factcal(&["calibrate", "--config", "/nonexistent/run.toml"]);
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("error"), "stderr should explain the failure: {stderr}");
}

#[test]
fn an_invalid_flag_value_is_a_configuration_error() {
    let config = fixture("run.toml");
    let output = factcal(&[
        "calibrate",
        "--config",
        config.to_str().unwrap(),
        "--cache-mode",
        "bogus",
    ]);
    assert_eq!(output.status.code(), Some(1), "nothing ran, so the config exit code applies");
    assert!(String::from_utf8_lossy(&output.stderr).contains("unknown cache mode"));
}

#[test]
fn a_stage_failure_exits_2_and_records_the_error_in_the_manifest() {
    // A responses file with two rows for the same query is a data error the
    // pipeline can only discover mid-stage.
    let out = tempfile::tempdir().unwrap();
    let fixtures_responses = fs::read_to_string(fixture("responses.jsonl")).unwrap();
    let first_row = fixtures_responses.lines().next().unwrap();
    let duplicated = format!("{fixtures_responses}{first_row}\n");
    let bad_responses = out.path().join("duplicated.jsonl");
    fs::write(&bad_responses, duplicated).unwrap();

    let config = fixture("run.toml");
    let report_dir = out.path().join("reports");
    let output = factcal(&[
        "calibrate",
        "--config",
        config.to_str().unwrap(),
        "--responses",
        bad_responses.to_str().unwrap(),
        "--output-dir",
        report_dir.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(2));

    let manifest = read_json(&single_subdir(&report_dir).join("manifest.json"));
    let error = manifest["error"].as_str().expect("failed runs record their error");
    assert!(error.contains("duplicate response"), "unexpected manifest error: {error}");
}

#[test]
fn a_warm_cache_rerun_reproduces_the_reports() {
    let out = tempfile::tempdir().unwrap();
    let cache_dir = out.path().join("cache");
    let cache_args =
        ["--cache-dir", cache_dir.to_str().unwrap(), "--cache-mode", "record_replay"];

    let first_out = out.path().join("first");
    let second_out = out.path().join("second");
    fs::create_dir_all(&first_out).unwrap();
    fs::create_dir_all(&second_out).unwrap();
    let first = run_ok("calibrate", &first_out, &cache_args);
    let recorded = fs::read_dir(cache_dir.join("subject")).unwrap().count();
    assert!(recorded > 0, "the first run should record subject-model responses");

    let second = run_ok("calibrate", &second_out, &cache_args);
    assert_eq!(first.file_name(), second.file_name(), "caching must not change run identity");
    assert_eq!(
        fs::read_dir(cache_dir.join("subject")).unwrap().count(),
        recorded,
        "a warm rerun adds no cache entries"
    );
    assert_eq!(
        fs::read(first.join("calibration.json")).unwrap(),
        fs::read(second.join("calibration.json")).unwrap(),
        "served-from-cache runs must reproduce the report bytes"
    );
}
