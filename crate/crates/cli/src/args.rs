//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "gatedkv", version, about = "Train and benchmark attention-gate KV-cache eviction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every command.
#[derive(Clone, Debug, Default, Args)]
pub struct Common {
    /// JSON run configuration; omitted sections take built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Dotted-path override, e.g. `model.tau=0.3`; repeatable.
    #[arg(long = "override", value_name = "KEY=VAL")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write `model.ckpt` plus per-step metrics.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Held-out perplexity, per-head eviction and the retention trend.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "none,ag")]
        policy: Vec<String>,
    },
    /// Policy comparison at the gate's measured eviction ratio.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "none,local,streaming_llm,h2o,random,ag")]
        policy: Vec<String>,
    },
    /// Eviction grids, attention heatmaps and flag dumps for one input.
    Viz {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Input text; defaults to the first held-out window.
        #[arg(long, conflicts_with = "input")]
        text: Option<String>,
        /// File holding the input text.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Write the synthetic training and held-out corpora.
    GenCorpus {
        #[command(flatten)]
        common: Common,
    },
}
