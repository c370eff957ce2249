//! Command-line pipeline: configuration, stage orchestration with
//! content-addressed manifests, and the figure report.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::PipelineConfig;
use crate::pipeline::{PipelineError, Runner, Stage};

#[derive(Debug, Parser)]
#[command(name = "claimcraft", version, about = "Synthetic claims cohorts, trajectory models and their evaluations")]
pub struct Cli {
    /// Pipeline configuration (JSON); `CLAIMCRAFT_<SECTION>__<FIELD>` variables override it.
    #[arg(long, global = true, default_value = "claimcraft.json")]
    pub config: PathBuf,
    /// Replaces the configured global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Re-run stages even when up to date or when manifests disagree.
    #[arg(long, global = true)]
    pub force: bool,
    /// Run every stage on a single thread.
    #[arg(long, global = true, conflicts_with = "threads")]
    pub deterministic: bool,
    /// Worker threads for parallel stages.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Synthesize the cohort and apply inclusion criteria.
    Generate,
    /// Build the vocabulary, token sequences and the holdout split.
    Tokenize,
    /// Next-token pre-training.
    Pretrain,
    /// Prompt-masked diagnosis post-training.
    Posttrain,
    /// Disease-onset AUCs for both models.
    EvalOnset,
    /// Next-year expenditure forecasts and metrics.
    EvalCost,
    /// Propensity-matched comparison with negative-control calibration.
    Rwe,
    /// SVG figures from the evaluation CSVs.
    Report,
    /// Every stage in order.
    All,
}

impl Command {
    pub fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::Generate => Stage::Generate,
            Command::Tokenize => Stage::Tokenize,
            Command::Pretrain => Stage::Pretrain,
            Command::Posttrain => Stage::Posttrain,
            Command::EvalOnset => Stage::EvalOnset,
            Command::EvalCost => Stage::EvalCost,
            Command::Rwe => Stage::Rwe,
            Command::Report => Stage::Report,
            Command::All => return None,
        })
    }
}

/// Loads, seeds and validates the configuration named on the command line.
pub fn load_config(cli: &Cli, env: impl IntoIterator<Item = (String, String)>) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = PipelineConfig::load(&cli.config, env).map_err(PipelineError::Config)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.propagate_seed();
    cfg.validate().map_err(PipelineError::Config)?;
    Ok(cfg)
}

fn init_threads(cli: &Cli) {
    let n = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = n {
        // A pool that already exists (a second call in one process) is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Runs the command and returns the process exit status.
pub fn run(cli: &Cli, env: impl IntoIterator<Item = (String, String)>) -> i32 {
    init_threads(cli);
    let res = load_config(cli, env).and_then(|cfg| {
        let runner = Runner::new(cfg, cli.force);
        match cli.command.stage() {
            Some(s) => runner.run(s).map(|_| ()),
            None => runner.run_all(),
        }
    });
    match res {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
