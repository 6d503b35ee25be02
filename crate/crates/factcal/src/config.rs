//! Run configuration: a TOML file with per-key CLI flag overrides, validated
//! before any backend call, plus the run manifest that stamps every output
//! directory with a deterministic identity derived from the semantic config
//! and input file digests.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::cache::CacheMode;
use crate::domain::DatasetSource;
use crate::estimators::{EstimatorConfig, EstimatorMethod};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config `{}`: {source}", path.display())]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config `{}`: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("{field}: referenced path `{}` does not exist", path.display())]
    MissingPath { field: &'static str, path: PathBuf },
    #[error("{0}")]
    Invalid(String),
}

/// Which implementation serves a backend role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Http,
}

/// One backend role: the subject model under measurement, the auxiliary
/// tool model, or the judge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub model_id: String,
    /// Script file for mock backends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    /// Endpoint for HTTP backends; falls back to the environment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub path: PathBuf,
    pub source: DatasetSource,
}

/// How facts are graded for correctness and relevance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradingOracleKind {
    ReferenceMatch,
    Judge,
    Fixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradingConfig {
    pub oracle: GradingOracleKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSettings {
    #[serde(default = "default_estimator_method")]
    pub method: String,
    #[serde(default = "default_consistency_samples")]
    pub consistency_samples: usize,
    #[serde(default = "default_consistency_temperature")]
    pub consistency_temperature: f64,
}

fn default_estimator_method() -> String {
    "verbalization".to_string()
}

fn default_consistency_samples() -> usize {
    crate::estimators::DEFAULT_CONSISTENCY_SAMPLES
}

fn default_consistency_temperature() -> f64 {
    crate::estimators::DEFAULT_CONSISTENCY_TEMPERATURE
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        Self {
            method: default_estimator_method(),
            consistency_samples: default_consistency_samples(),
            consistency_temperature: default_consistency_temperature(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningSettings {
    #[serde(default = "default_bin_count")]
    pub bin_count: usize,
}

fn default_bin_count() -> usize {
    10
}

impl Default for BinningSettings {
    fn default() -> Self {
        Self { bin_count: default_bin_count() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfixSettings {
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default)]
    pub include_reference_scores: bool,
}

fn default_max_iterations() -> usize {
    crate::confix::DEFAULT_MAX_ITERATIONS
}

impl Default for ConfixSettings {
    fn default() -> Self {
        Self {
            max_iterations: default_max_iterations(),
            include_reference_scores: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CacheConfig {
    /// Cache directory; caching is off when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub mode: CacheMode,
}

/// The complete, validated run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    /// Pre-generated responses file; when absent, responses are generated
    /// from the subject backend at temperature 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub responses: Option<PathBuf>,
    pub subject: BackendConfig,
    pub tool: BackendConfig,
    pub judge: BackendConfig,
    #[serde(default)]
    pub grading: Option<GradingConfig>,
    #[serde(default)]
    pub estimator: EstimatorSettings,
    #[serde(default)]
    pub binning: BinningSettings,
    #[serde(default)]
    pub confix: ConfixSettings,
    #[serde(default)]
    pub cache: CacheConfig,
    /// Directory holding template override files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_overrides: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_parallelism() -> usize {
    4
}

/// CLI flag values that override config-file keys (flags win).
#[derive(Debug, Clone, Default)]
pub struct ConfigOverrides {
    pub dataset: Option<PathBuf>,
    pub dataset_source: Option<DatasetSource>,
    pub responses: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub parallelism: Option<usize>,
    pub seed: Option<u64>,
    pub estimator: Option<String>,
    pub bin_count: Option<usize>,
    pub max_iterations: Option<usize>,
    pub include_reference_scores: Option<bool>,
    pub cache_dir: Option<PathBuf>,
    pub cache_mode: Option<CacheMode>,
    pub prompt_overrides: Option<PathBuf>,
}

impl RunConfig {
    /// Reads a TOML config, applies flag overrides, and validates the
    /// result. Paths in the file are resolved relative to the file's parent
    /// directory.
    pub fn load(path: &Path, overrides: &ConfigOverrides) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let mut config: RunConfig = toml::from_str(&text)
            .map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        if let Some(base) = path.parent() {
            config.resolve_relative_paths(base);
        }
        config.apply(overrides);
        config.validate()?;
        Ok(config)
    }

    fn resolve_relative_paths(&mut self, base: &Path) {
        let resolve = |target: &mut PathBuf| {
            if target.is_relative() {
                *target = base.join(&*target);
            }
        };
        resolve(&mut self.dataset.path);
        resolve(&mut self.output_dir);
        if let Some(responses) = self.responses.as_mut() {
            resolve(responses);
        }
        for backend in [&mut self.subject, &mut self.tool, &mut self.judge] {
            if let Some(script) = backend.script.as_mut() {
                resolve(script);
            }
        }
        if let Some(grading) = self.grading.as_mut() {
            if let Some(fixture) = grading.fixture_path.as_mut() {
                resolve(fixture);
            }
        }
        if let Some(dir) = self.cache.dir.as_mut() {
            resolve(dir);
        }
        if let Some(dir) = self.prompt_overrides.as_mut() {
            resolve(dir);
        }
    }

    fn apply(&mut self, overrides: &ConfigOverrides) {
        if let Some(path) = &overrides.dataset {
            self.dataset.path = path.clone();
        }
        if let Some(source) = overrides.dataset_source {
            self.dataset.source = source;
        }
        if let Some(path) = &overrides.responses {
            self.responses = Some(path.clone());
        }
        if let Some(dir) = &overrides.output_dir {
            self.output_dir = dir.clone();
        }
        if let Some(parallelism) = overrides.parallelism {
            self.parallelism = parallelism;
        }
        if let Some(seed) = overrides.seed {
            self.seed = Some(seed);
        }
        if let Some(method) = &overrides.estimator {
            self.estimator.method = method.clone();
        }
        if let Some(bin_count) = overrides.bin_count {
            self.binning.bin_count = bin_count;
        }
        if let Some(max_iterations) = overrides.max_iterations {
            self.confix.max_iterations = max_iterations;
        }
        if let Some(include) = overrides.include_reference_scores {
            self.confix.include_reference_scores = include;
        }
        if let Some(dir) = &overrides.cache_dir {
            self.cache.dir = Some(dir.clone());
        }
        if let Some(mode) = overrides.cache_mode {
            self.cache.mode = mode;
        }
        if let Some(dir) = &overrides.prompt_overrides {
            self.prompt_overrides = Some(dir.clone());
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let exists = |field: &'static str, path: &Path| {
            if path.exists() {
                Ok(())
            } else {
                Err(ConfigError::MissingPath { field, path: path.to_path_buf() })
            }
        };
        exists("dataset.path", &self.dataset.path)?;
        if let Some(responses) = &self.responses {
            exists("responses", responses)?;
        }
        for (role, backend) in
            [("subject", &self.subject), ("tool", &self.tool), ("judge", &self.judge)]
        {
            match backend.kind {
                BackendKind::Mock => match &backend.script {
                    Some(script) => exists("backend script", script)?,
                    None => {
                        return Err(ConfigError::Invalid(format!(
                            "{role} backend: mock backends need a script path"
                        )))
                    }
                },
                BackendKind::Http => {}
            }
            if backend.model_id.trim().is_empty() {
                return Err(ConfigError::Invalid(format!(
                    "{role} backend: model_id must be non-empty"
                )));
            }
        }
        if let Some(grading) = &self.grading {
            match grading.oracle {
                GradingOracleKind::Fixture => match &grading.fixture_path {
                    Some(path) => exists("grading.fixture_path", path)?,
                    None => {
                        return Err(ConfigError::Invalid(
                            "grading: the fixture oracle needs fixture_path".to_string(),
                        ))
                    }
                },
                GradingOracleKind::ReferenceMatch | GradingOracleKind::Judge => {}
            }
        }
        if let Some(dir) = &self.prompt_overrides {
            exists("prompt_overrides", dir)?;
        }
        if self.parallelism == 0 {
            return Err(ConfigError::Invalid("parallelism must be at least 1".to_string()));
        }
        if self.binning.bin_count == 0 {
            return Err(ConfigError::Invalid("binning.bin_count must be at least 1".to_string()));
        }
        if self.confix.max_iterations == 0 {
            return Err(ConfigError::Invalid(
                "confix.max_iterations must be at least 1".to_string(),
            ));
        }
        self.estimator_method()?;
        if self.estimator.consistency_samples == 0 {
            return Err(ConfigError::Invalid(
                "estimator.consistency_samples must be at least 1".to_string(),
            ));
        }
        if !(self.estimator.consistency_temperature > 0.0) {
            return Err(ConfigError::Invalid(
                "estimator.consistency_temperature must be positive".to_string(),
            ));
        }
        Ok(())
    }

    pub fn estimator_method(&self) -> Result<EstimatorMethod, ConfigError> {
        EstimatorMethod::from_str(&self.estimator.method)
            .map_err(|message| ConfigError::Invalid(format!("estimator.method: {message}")))
    }

    pub fn estimator_config(&self) -> Result<EstimatorConfig, ConfigError> {
        Ok(EstimatorConfig {
            method: self.estimator_method()?,
            consistency_samples: self.estimator.consistency_samples,
            consistency_temperature: self.estimator.consistency_temperature,
            seed: self.seed,
        })
    }

    /// Deterministic 12-hex-digit run identity: a digest of the semantic
    /// config plus the contents of every referenced input file, tagged by
    /// role. Identity deliberately excludes everything that cannot change
    /// results — output and cache locations, the parallelism level, and
    /// every file *path* (each referenced file enters the digest by role and
    /// content, so the same inputs give the same identity from any
    /// checkout).
    pub fn manifest_id(&self) -> Result<String, ConfigError> {
        let mut semantic = serde_json::to_value(self).expect("config serializes");
        let object = semantic.as_object_mut().expect("config is a JSON object");
        object.remove("output_dir");
        object.remove("cache");
        object.remove("parallelism");
        object.remove("responses");
        object.remove("prompt_overrides");
        if let Some(dataset) = object.get_mut("dataset").and_then(|v| v.as_object_mut()) {
            dataset.remove("path");
        }
        for role in ["subject", "tool", "judge"] {
            if let Some(backend) = object.get_mut(role).and_then(|v| v.as_object_mut()) {
                backend.remove("script");
            }
        }
        if let Some(grading) = object.get_mut("grading").and_then(|v| v.as_object_mut()) {
            grading.remove("fixture_path");
        }
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&semantic).expect("config serializes").as_slice());
        for (role, path) in self.input_files() {
            hasher.update([0x1f]);
            hasher.update(role.as_bytes());
            hasher.update([0x1f]);
            let bytes = std::fs::read(&path)
                .map_err(|source| ConfigError::Read { path: path.clone(), source })?;
            hasher.update(&bytes);
        }
        Ok(hex::encode(&hasher.finalize()[..6]))
    }

    /// Every input file that feeds the run, tagged with its role. Prompt
    /// override roles carry the overridden file's name, since which template
    /// a body replaces is part of run identity.
    fn input_files(&self) -> Vec<(String, PathBuf)> {
        let mut files = vec![("dataset".to_string(), self.dataset.path.clone())];
        if let Some(responses) = &self.responses {
            files.push(("responses".to_string(), responses.clone()));
        }
        for (role, backend) in
            [("subject", &self.subject), ("tool", &self.tool), ("judge", &self.judge)]
        {
            if let Some(script) = &backend.script {
                files.push((format!("{role}_script"), script.clone()));
            }
        }
        if let Some(grading) = &self.grading {
            if let Some(fixture) = &grading.fixture_path {
                files.push(("grading_fixture".to_string(), fixture.clone()));
            }
        }
        if let Some(dir) = &self.prompt_overrides {
            let mut overrides: Vec<PathBuf> = std::fs::read_dir(dir)
                .into_iter()
                .flatten()
                .flatten()
                .map(|entry| entry.path())
                .filter(|path| path.is_file())
                .collect();
            overrides.sort();
            for path in overrides {
                let name = path.file_name().map(|n| n.to_string_lossy().into_owned());
                files.push((format!("prompt_override:{}", name.unwrap_or_default()), path));
            }
        }
        files
    }
}

/// Per-stage progress counts recorded in the manifest.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub responses: usize,
    pub facts: usize,
    pub extraction_failures: usize,
    pub estimator_failures: usize,
    pub grading_exclusions: usize,
    pub degenerate_responses: usize,
    pub corrections_accepted: usize,
    pub judged_revisions: usize,
}

/// The record stamped into every output directory: what ran, over which
/// inputs, and how far it got. Timestamps are Unix seconds and are the only
/// fields expected to differ between identical runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub manifest_id: String,
    pub artifact_version: String,
    pub command: String,
    pub started_unix_secs: u64,
    pub finished_unix_secs: u64,
    pub counts: StageCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config: RunConfig,
}

pub const MANIFEST_SCHEMA: &str = "factcal.manifest.v1";

impl RunManifest {
    pub fn new(command: &str, manifest_id: String, config: RunConfig) -> Self {
        Self {
            schema: MANIFEST_SCHEMA.to_string(),
            manifest_id,
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            started_unix_secs: unix_now(),
            finished_unix_secs: 0,
            counts: StageCounts::default(),
            error: None,
            config,
        }
    }
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mock => "mock",
            Self::Http => "http",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(path: &Path, text: &str) {
        std::fs::write(path, text).unwrap();
    }

    fn minimal_config_toml() -> &'static str {
        r#"
[dataset]
path = "data.jsonl"
source = "custom"

[subject]
kind = "mock"
model_id = "subject-m"
script = "subject.json"

[tool]
kind = "mock"
model_id = "tool-m"
script = "tool.json"

[judge]
kind = "mock"
model_id = "judge-m"
script = "judge.json"
"#
    }

    fn scaffold(dir: &Path) -> PathBuf {
        write(&dir.join("data.jsonl"), "{\"query\": \"q?\"}\n");
        for name in ["subject.json", "tool.json", "judge.json"] {
            write(&dir.join(name), "{\"entries\": []}");
        }
        let config_path = dir.join("run.toml");
        write(&config_path, minimal_config_toml());
        config_path
    }

    #[test]
    fn loads_defaults_and_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let config_path = scaffold(dir.path());
        let config = RunConfig::load(&config_path, &ConfigOverrides::default()).unwrap();
        assert_eq!(config.dataset.path, dir.path().join("data.jsonl"));
        assert_eq!(config.parallelism, 4);
        assert_eq!(config.binning.bin_count, 10);
        assert_eq!(config.confix.max_iterations, 3);
        assert_eq!(config.estimator.method, "verbalization");
        assert_eq!(config.output_dir, dir.path().join("out"));
    }

    #[test]
    fn missing_dataset_fails_validation_before_any_backend_work() {
        let dir = tempfile::tempdir().unwrap();
        let config_path = scaffold(dir.path());
        std::fs::remove_file(dir.path().join("data.jsonl")).unwrap();
        let err = RunConfig::load(&config_path, &ConfigOverrides::default()).unwrap_err();
        assert!(matches!(err, ConfigError::MissingPath { field: "dataset.path", .. }));
    }

    #[test]
    fn flag_overrides_win_over_file_keys() {
        let dir = tempfile::tempdir().unwrap();
        let config_path = scaffold(dir.path());
        let overrides = ConfigOverrides {
            parallelism: Some(1),
            bin_count: Some(5),
            max_iterations: Some(7),
            estimator: Some("is_true_logit".to_string()),
            seed: Some(17),
            ..ConfigOverrides::default()
        };
        let config = RunConfig::load(&config_path, &overrides).unwrap();
        assert_eq!(config.parallelism, 1);
        assert_eq!(config.binning.bin_count, 5);
        assert_eq!(config.confix.max_iterations, 7);
        assert_eq!(config.seed, Some(17));
        assert!(matches!(config.estimator_method().unwrap(), EstimatorMethod::IsTrueLogit));
    }

    #[test]
    fn invalid_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let config_path = scaffold(dir.path());
        let cases: [(fn(&mut ConfigOverrides), &str); 4] = [
            (|o| o.parallelism = Some(0), "parallelism"),
            (|o| o.bin_count = Some(0), "bin_count"),
            (|o| o.max_iterations = Some(0), "max_iterations"),
            (|o| o.estimator = Some("telepathy".to_string()), "estimator"),
        ];
        for (apply, message) in cases {
            let mut overrides = ConfigOverrides::default();
            apply(&mut overrides);
            let err = RunConfig::load(&config_path, &overrides).unwrap_err();
            assert!(err.to_string().contains(message), "{message}: got {err}");
        }
    }

    #[test]
    fn fixture_grading_requires_a_fixture_path() {
        let dir = tempfile::tempdir().unwrap();
        let config_path = scaffold(dir.path());
        let mut text = minimal_config_toml().to_string();
        text.push_str("\n[grading]\noracle = \"fixture\"\n");
        write(&config_path, &text);
        let err = RunConfig::load(&config_path, &ConfigOverrides::default()).unwrap_err();
        assert!(err.to_string().contains("fixture_path"));
    }

    #[test]
    fn manifest_id_is_stable_and_tracks_semantic_changes_only() {
        let dir = tempfile::tempdir().unwrap();
        let config_path = scaffold(dir.path());
        let config = RunConfig::load(&config_path, &ConfigOverrides::default()).unwrap();
        let id = config.manifest_id().unwrap();
        assert_eq!(id.len(), 12);
        assert_eq!(id, config.manifest_id().unwrap());

        // Output location does not change identity.
        let moved = RunConfig {
            output_dir: dir.path().join("elsewhere"),
            ..config.clone()
        };
        assert_eq!(id, moved.manifest_id().unwrap());

        // Neither does moving the whole run to another directory: input
        // files enter the digest by role and content, not by path.
        let elsewhere = tempfile::tempdir().unwrap();
        let elsewhere_config_path = scaffold(elsewhere.path());
        let relocated =
            RunConfig::load(&elsewhere_config_path, &ConfigOverrides::default()).unwrap();
        assert_eq!(id, relocated.manifest_id().unwrap());

        // A different seed does.
        let reseeded = RunConfig { seed: Some(99), ..config.clone() };
        assert_ne!(id, reseeded.manifest_id().unwrap());

        // Role tags bind each script's content to its role: swapping two
        // distinct scripts between subject and tool changes identity.
        write(&dir.path().join("subject.json"), "{\"entries\": [], \"v\": 1}");
        let distinct = RunConfig::load(&config_path, &ConfigOverrides::default()).unwrap();
        let swapped = RunConfig {
            subject: BackendConfig {
                script: Some(dir.path().join("tool.json")),
                ..distinct.subject.clone()
            },
            tool: BackendConfig {
                script: Some(dir.path().join("subject.json")),
                ..distinct.tool.clone()
            },
            ..distinct.clone()
        };
        assert_ne!(distinct.manifest_id().unwrap(), swapped.manifest_id().unwrap());
        write(&dir.path().join("subject.json"), "{\"entries\": []}");

        // Changing an input file's bytes does.
        write(&dir.path().join("data.jsonl"), "{\"query\": \"different?\"}\n");
        assert_ne!(id, config.manifest_id().unwrap());
    }
}
