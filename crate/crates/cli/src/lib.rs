//! The `temporec` command-line pipeline: staged, hash-checked runs from raw
//! interaction logs to comparison and ablation tables.

pub mod config;
pub mod manifest;
pub mod stages;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use temporec::Result;

use config::RunConfig;
use manifest::Workspace;

#[derive(Debug, Parser)]
#[command(name = "temporec", version, about = "Temporal user profiling for recommendation")]
pub struct Cli {
    #[command(subcommand)]
    pub stage: Stage,

    /// JSON run configuration; relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override a configuration field, e.g. `--set train.learning_rate=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    /// Run a single seed (also seeds the synthetic generator).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Stage {
    /// Filter items, split each user's history in time, and write the split.
    Ingest,
    /// Generate short-term, long-term and general profiles for every user.
    Profile,
    /// Embed catalog items and profile texts.
    Encode,
    /// Train every configured method for every seed.
    Train,
    /// Score the test split with the trained models.
    Evaluate,
    /// Train and evaluate the profile model's scoring variants.
    Ablate,
    /// Render the comparison and ablation tables.
    Report,
    /// Write a synthetic dataset with planted short- and long-term topics.
    Synth,
}

pub fn run(cli: &Cli) -> Result<()> {
    let (cfg, base) = RunConfig::load(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    let ws = Workspace::new(&base, &cfg.work_dir);
    match cli.stage {
        Stage::Synth => stages::synth(&cfg, &ws),
        Stage::Ingest => stages::ingest(&cfg, &ws),
        Stage::Profile => stages::profile(&cfg, &ws),
        Stage::Encode => stages::encode(&cfg, &ws),
        Stage::Train => stages::train(&cfg, &ws),
        Stage::Evaluate => stages::evaluate(&cfg, &ws),
        Stage::Ablate => stages::ablate(&cfg, &ws),
        Stage::Report => stages::report(&cfg, &ws),
    }
}
