//! Measures how well a model's stated confidence in the individual facts of
//! a long-form answer tracks whether those facts are actually right, and
//! applies a confidence-guided correction loop that rewrites only the
//! low-confidence facts.
//!
//! The pipeline runs in stages over a query dataset: decompose each response
//! into atomic facts, grade each fact's correctness and relevance, estimate
//! per-fact confidence, and aggregate into fact-level calibration metrics.
//! The correction loop then partitions facts by confidence, rewrites the
//! low-confidence group factor-by-factor using the high-confidence group as
//! reference knowledge, and keeps a rewrite only when the re-estimated
//! confidence strictly improves.

pub mod backend;
pub mod config;
pub mod confix;
pub mod domain;
pub mod estimators;
pub mod extraction;
pub mod grading;
pub mod judge;
pub mod metrics;
pub mod pipeline;
pub mod prompts;
pub mod report;
pub mod util;

pub use backend::{Backend, BackendError, BackendHandle};
pub use config::{ConfigOverrides, RunConfig, RunManifest};
pub use domain::{DatasetSource, FactUnit, Partition, QueryRecord, ResponseRecord, UnitScore};
pub use pipeline::PipelineError;
