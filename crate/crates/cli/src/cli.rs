// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use attrigraph_core::engine::RuleVariant;
use clap::{Args, Parser, Subcommand};

use crate::config::ModeFlag;

#[derive(Debug, Parser)]
#[command(
    name = "attrigraph",
    version,
    about = "Contrastive relevance attribution graphs for decoder-only transformers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// ATGW weight file, `toy`, or `toy:<seed>`.
    #[arg(long, default_value = "toy")]
    pub model: String,
    /// Relevance rule variant: attnlrp, cplrp or gradient.
    #[arg(long, default_value = "attnlrp")]
    pub rules: RuleVariant,
}

#[derive(Debug, Clone, Args)]
pub struct GraphArgs {
    #[arg(long, value_enum, default_value = "cumulative")]
    pub prune_mode: ModeFlag,
    /// Absolute edge threshold for global mode.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Retained mass fraction for cumulative mode (default 0.85).
    #[arg(long)]
    pub p: Option<f64>,
    /// Minimum |relevance| for a node (default 0.01).
    #[arg(long)]
    pub node_threshold: Option<f64>,
    /// Targets per backward call; defaults to min(8, n).
    #[arg(long)]
    pub batch: Option<usize>,
    /// `consecutive` or a comma list of `s:t` pairs.
    #[arg(long, default_value = "consecutive", allow_hyphen_values = true)]
    pub layer_pairs: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Input-token heatmap and contrast-pair verdict for one case.
    Attribute {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write an HTML rendering.
        #[arg(long)]
        html: bool,
        /// Logit-gap threshold for accepting the pair.
        #[arg(long, default_value_t = attrigraph_core::attribution::DEFAULT_PAIR_THRESHOLD, allow_hyphen_values = true)]
        threshold: f64,
    },
    /// Pruned attribution graph connected to the prediction node.
    Graph {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Batch report over a case directory, with optional cross-run comparison.
    Analyze {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        cases_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long, default_value = "consecutive", allow_hyphen_values = true)]
        layer_pairs: String,
        /// Number of profile clusters.
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Extra model compared against `--model`, as `id=model`; repeatable.
        #[arg(long = "run")]
        runs: Vec<String>,
    },
    /// Wall time and backward calls across sequence lengths and batch sizes.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "16,64,128")]
        lengths: String,
        #[arg(long, default_value = "1,2,4,8")]
        batches: String,
        #[arg(long, default_value = "consecutive", allow_hyphen_values = true)]
        layer_pairs: String,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for bench.json and bench.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// HTTP service over a case directory.
    Serve {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        cases_dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long, default_value = "consecutive", allow_hyphen_values = true)]
        layer_pairs: String,
        /// Extra model for /compare, as `id=model`; repeatable.
        #[arg(long = "run")]
        runs: Vec<String>,
        /// Simultaneous graph builds.
        #[arg(long, default_value_t = 2)]
        max_builds: usize,
    },
    /// Writes seeded synthetic cases built from the model's own predictions.
    Synth {
        #[arg(long, default_value = "toy")]
        model: String,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        min_len: usize,
        #[arg(long, default_value_t = 28)]
        max_len: usize,
        /// Smallest token id used for content.
        #[arg(long, default_value_t = 4)]
        first_content: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Saves a model (e.g. a toy model) as an ATGW file.
    ExportModel {
        #[arg(long)]
        model: String,
        #[arg(long)]
        out: PathBuf,
    },
}
