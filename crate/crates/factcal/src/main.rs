//! Command-line entry point. Every subcommand takes a TOML run config via
//! `--config` plus optional per-key override flags, and writes its reports
//! to `<output_dir>/<manifest-id>/`.
//!
//! Exit codes: 0 on success, 1 for configuration errors (nothing ran),
//! 2 for stage failures (partial outputs and a manifest recording the error
//! are on disk).

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use factcal::backend::CacheMode;
use factcal::pipeline::{cmd_calibrate, cmd_confix, cmd_extract, cmd_judge, cmd_report};
use factcal::{ConfigOverrides, DatasetSource, PipelineError, RunConfig};

#[derive(Parser)]
#[command(
    name = "factcal",
    version,
    about = "Fact-level confidence calibration and confidence-guided \
             self-correction for long-form model responses"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration file (TOML).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Dataset file; overrides the config key.
    #[arg(long, value_name = "FILE")]
    dataset: Option<PathBuf>,
    /// Dataset layout: asqa, longfact, or custom.
    #[arg(long, value_name = "SOURCE")]
    dataset_source: Option<String>,
    /// Pre-generated responses file; overrides the config key.
    #[arg(long, value_name = "FILE")]
    responses: Option<PathBuf>,
    /// Where report directories are created.
    #[arg(long, value_name = "DIR")]
    output_dir: Option<PathBuf>,
    /// Concurrent backend requests.
    #[arg(long, value_name = "N")]
    parallelism: Option<usize>,
    /// Seed forwarded to backends that honor seeding.
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
    /// Confidence estimator: verbalization, is_true_logit, or consistency.
    #[arg(long, value_name = "METHOD")]
    estimator: Option<String>,
    /// Calibration bin count.
    #[arg(long, value_name = "K")]
    bin_count: Option<usize>,
    /// Correction attempts per low-confidence fact.
    #[arg(long, value_name = "N")]
    max_iterations: Option<usize>,
    /// Append confidence scores to the correction prompt's reference facts.
    #[arg(long, value_name = "BOOL")]
    include_reference_scores: Option<bool>,
    /// Backend response cache directory.
    #[arg(long, value_name = "DIR")]
    cache_dir: Option<PathBuf>,
    /// Cache mode: temperature0_only or record_replay.
    #[arg(long, value_name = "MODE")]
    cache_mode: Option<String>,
    /// Directory with prompt template override files.
    #[arg(long, value_name = "DIR")]
    prompt_overrides: Option<PathBuf>,
}

impl CommonArgs {
    fn overrides(&self) -> Result<ConfigOverrides, String> {
        let dataset_source = self
            .dataset_source
            .as_deref()
            .map(DatasetSource::from_str)
            .transpose()
            .map_err(|e| format!("--dataset-source: {e}"))?;
        let cache_mode = self
            .cache_mode
            .as_deref()
            .map(parse_cache_mode)
            .transpose()
            .map_err(|e| format!("--cache-mode: {e}"))?;
        Ok(ConfigOverrides {
            dataset: self.dataset.clone(),
            dataset_source,
            responses: self.responses.clone(),
            output_dir: self.output_dir.clone(),
            parallelism: self.parallelism,
            seed: self.seed,
            estimator: self.estimator.clone(),
            bin_count: self.bin_count,
            max_iterations: self.max_iterations,
            include_reference_scores: self.include_reference_scores,
            cache_dir: self.cache_dir.clone(),
            cache_mode,
            prompt_overrides: self.prompt_overrides.clone(),
        })
    }

    fn load_config(&self) -> Result<RunConfig, PipelineError> {
        let overrides = self
            .overrides()
            .map_err(|message| factcal::config::ConfigError::Invalid(message))?;
        Ok(RunConfig::load(&self.config, &overrides)?)
    }
}

fn parse_cache_mode(text: &str) -> Result<CacheMode, String> {
    match text.trim().to_ascii_lowercase().as_str() {
        "temperature0_only" | "temperature0-only" => Ok(CacheMode::Temperature0Only),
        "record_replay" | "record-replay" => Ok(CacheMode::RecordReplay),
        other => Err(format!("unknown cache mode `{other}`")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Decompose each response into atomic facts.
    Extract(CommonArgs),
    /// Grade facts, estimate confidence, and report calibration.
    Calibrate(CommonArgs),
    /// Run the confidence-guided self-correction loop and report on it.
    Confix(CommonArgs),
    /// Judge revised facts against their original wording.
    Judge {
        #[command(flatten)]
        common: CommonArgs,
        /// Responses file with the original fact wording.
        #[arg(long, value_name = "FILE")]
        original: PathBuf,
        /// Responses file with the revised fact wording.
        #[arg(long, value_name = "FILE")]
        revised: PathBuf,
    },
    /// Recompute reports from a scored responses file without backend calls.
    Report(CommonArgs),
}

fn run(cli: Cli) -> Result<PathBuf, PipelineError> {
    match &cli.command {
        Command::Extract(common) => cmd_extract(common.load_config()?),
        Command::Calibrate(common) => cmd_calibrate(common.load_config()?),
        Command::Confix(common) => cmd_confix(common.load_config()?),
        Command::Judge { common, original, revised } => {
            cmd_judge(common.load_config()?, original, revised)
        }
        Command::Report(common) => cmd_report(common.load_config()?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(dir) => {
            eprintln!("[factcal] done; reports in {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(error) => {
            eprintln!("[factcal] error: {error}");
            ExitCode::from(error.exit_code())
        }
    }
}
