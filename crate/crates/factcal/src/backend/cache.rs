//! Persistent completion cache: one file per request digest, so interrupted
//! runs resume without repeating deterministic backend calls.

use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::util::atomic_write;

use super::{Backend, BackendError, BackendHandle, CacheKey, CompletionRequest, CompletionResult};

const ENTRY_SCHEMA: &str = "factcal.cache.v1";

/// Which calls get cached.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    /// Only deterministic (temperature 0) completions are cached. Default.
    #[default]
    Temperature0Only,
    /// Additionally record and replay sampled calls; for test fixtures and
    /// reproducible sampled runs.
    RecordReplay,
}

#[derive(Serialize, Deserialize)]
struct CompletionEntry {
    schema: String,
    backend: String,
    request: CompletionRequest,
    result: CompletionResult,
}

#[derive(Serialize, Deserialize)]
struct SampleEntry {
    schema: String,
    backend: String,
    request: CompletionRequest,
    samples: usize,
    results: Vec<CompletionResult>,
}

/// Wraps any backend with an on-disk cache keyed by request digest. Hits are
/// served without touching the inner backend; misses write through
/// atomically, so a killed run never leaves a truncated entry.
pub struct CachedBackend {
    inner: BackendHandle,
    dir: PathBuf,
    mode: CacheMode,
}

impl CachedBackend {
    pub fn new(inner: BackendHandle, dir: impl Into<PathBuf>, mode: CacheMode) -> Self {
        Self { inner, dir: dir.into(), mode }
    }

    fn entry_path(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!("{}.json", key.as_str()))
    }

    fn load<E: DeserializeOwned>(&self, path: &Path) -> Result<Option<E>, BackendError> {
        let text = match std::fs::read_to_string(path) {
            Ok(text) => text,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(BackendError::Cache(format!("{}: {e}", path.display()))),
        };
        let entry: E = serde_json::from_str(&text)
            .map_err(|e| BackendError::Cache(format!("{}: corrupt entry: {e}", path.display())))?;
        Ok(Some(entry))
    }

    fn store<E: Serialize>(&self, path: &Path, entry: &E) -> Result<(), BackendError> {
        let bytes = serde_json::to_vec_pretty(entry)
            .map_err(|e| BackendError::Cache(e.to_string()))?;
        atomic_write(path, &bytes)
            .map_err(|e| BackendError::Cache(format!("{}: {e}", path.display())))
    }
}

impl Backend for CachedBackend {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn supports_logprobs(&self) -> bool {
        self.inner.supports_logprobs()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        let cacheable = request.temperature == 0.0 || self.mode == CacheMode::RecordReplay;
        if !cacheable {
            return self.inner.complete(request);
        }
        let key = CacheKey::for_completion(self.inner.name(), request);
        let path = self.entry_path(&key);
        if let Some(entry) = self.load::<CompletionEntry>(&path)? {
            return Ok(entry.result);
        }
        let result = self.inner.complete(request)?;
        self.store(
            &path,
            &CompletionEntry {
                schema: ENTRY_SCHEMA.to_string(),
                backend: self.inner.name().to_string(),
                request: request.clone(),
                result: result.clone(),
            },
        )?;
        Ok(result)
    }

    fn sample_n(&self, request: &CompletionRequest, n: usize) -> Result<Vec<CompletionResult>, BackendError> {
        if self.mode != CacheMode::RecordReplay {
            return self.inner.sample_n(request, n);
        }
        let key = CacheKey::for_samples(self.inner.name(), request, n);
        let path = self.entry_path(&key);
        if let Some(entry) = self.load::<SampleEntry>(&path)? {
            return Ok(entry.results);
        }
        let results = self.inner.sample_n(request, n)?;
        self.store(
            &path,
            &SampleEntry {
                schema: ENTRY_SCHEMA.to_string(),
                backend: self.inner.name().to_string(),
                request: request.clone(),
                samples: n,
                results: results.clone(),
            },
        )?;
        Ok(results)
    }
}
