//! `vicl`: the pipeline as subcommands.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 client or
//! transport error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vicl_core::composer::{OrderPolicy, PromptMode};
use vicl_core::types::SummaryStrategy;
use vicl_core::ErrorKind;

#[derive(Debug, Parser)]
#[command(name = "vicl", version, about = "Visual in-context learning pipeline")]
pub struct Cli {
    /// Log progress to standard error (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment configuration (TOML).
    #[arg(short, long)]
    pub config: PathBuf,

    /// Override a configuration value, e.g. `run.demo_count=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args, Default)]
pub struct RunFlags {
    /// Prompt mode: zero-shot, icl or vicl.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<PromptMode>,

    /// Demonstrations per prompt.
    #[arg(short = 'n', long)]
    pub demo_count: Option<usize>,

    /// Candidates retrieved before reranking.
    #[arg(short = 'k', long)]
    pub pool_size: Option<usize>,

    /// Summary strategy: standard, task-intent, image-parsing or iois.
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<SummaryStrategy>,

    /// Demonstration order: rerank, head, middle or tail.
    #[arg(long, value_parser = parse_order)]
    pub order: Option<OrderPolicy>,

    /// Token budget for the whole prompt.
    #[arg(long)]
    pub budget: Option<usize>,

    /// Skip the rerank stage.
    #[arg(long)]
    pub no_rerank: bool,

    /// Seed recorded in the output and used for seeded choices.
    #[arg(long)]
    pub seed: Option<u64>,
}

fn parse_mode(s: &str) -> Result<PromptMode, String> {
    s.parse().map_err(|e: vicl_core::Error| e.to_string())
}

fn parse_strategy(s: &str) -> Result<SummaryStrategy, String> {
    s.parse().map_err(|e: vicl_core::Error| e.to_string())
}

fn parse_order(s: &str) -> Result<OrderPolicy, String> {
    s.parse().map_err(|e: vicl_core::Error| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    DemoCount,
    ContextBudget,
    OrderSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Aggregate {
    Mean,
    PerTrace,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Embed every candidate image and write the index.
    BuildIndex {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Summarize every candidate with the configured strategy.
    Summarize {
        #[command(flatten)]
        config: ConfigArgs,
        /// Summary strategy: standard, task-intent, image-parsing or iois.
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<SummaryStrategy>,
    },
    /// Show the ranked demonstration pool for one test item.
    Retrieve {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        flags: RunFlags,
        /// Test item id.
        #[arg(long)]
        query: String,
    },
    /// Evaluate the test split and write JSONL records.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        flags: RunFlags,
        /// Records file (default: <work_dir>/results-<mode>.jsonl).
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Evaluate once per setting of one axis; writes CSV and JSON.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        flags: RunFlags,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated settings for demo-count and context-budget.
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
        /// Output path without extension (default: <work_dir>/sweep-<axis>).
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Build relabeled unlearning sets and evaluate both of them.
    Unlearn {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        flags: RunFlags,
        /// Output directory (default: <work_dir>/unlearn).
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Compute per-layer information-flow scores from trace bundles.
    AnalyzeFlow {
        /// TraceBundle JSON file; repeat for several.
        #[arg(long = "trace", required = true)]
        traces: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "mean")]
        aggregate: Aggregate,
        /// CSV destination (default: standard output). Per-trace output
        /// with several traces needs a directory.
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// JSON sidecar with set sizes and head-averaged curves
        /// (default: next to the CSV).
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
    /// Serve the deterministic mock over the HTTP protocol.
    MockServe {
        /// hash, clustered, echo-label or scripted.
        #[arg(long, default_value = "echo-label")]
        mode: String,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// 0 picks a free port; the bound address is printed.
        #[arg(long, default_value_t = 8400)]
        port: u16,
        #[arg(long, default_value = "mock")]
        model_id: String,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON script for the scripted mode.
        #[arg(long)]
        script: Option<PathBuf>,
        /// Answer /v1/trace with 501.
        #[arg(long)]
        no_trace: bool,
        /// Fail every n-th request with 503 (fault injection).
        #[arg(long, default_value_t = 0)]
        fail_every: usize,
    },
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Client => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
