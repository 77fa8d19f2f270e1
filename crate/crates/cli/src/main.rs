mod commands;
mod eval_cmd;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "divsel", version, about = "Diversity-aware exemplar selection for intent prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build or inspect the exemplar memory.
    #[command(subcommand)]
    Memory(MemoryCmd),
    /// Retrieve a candidate pool for one query.
    Retrieve(RetrieveArgs),
    /// Select exemplars from a pool.
    Select(SelectArgs),
    /// Compose a prompt from a dialogue and a selection.
    Compose(ComposeArgs),
    /// Score candidate labels with a verifier and decide.
    Decide(DecideArgs),
    /// Latency model, calibration and budget control.
    #[command(subcommand)]
    Budget(BudgetCmd),
    /// Experiment harness.
    #[command(subcommand)]
    Eval(EvalCmd),
}

#[derive(Debug, Subcommand)]
enum MemoryCmd {
    /// Ingest line-delimited exemplars and persist the memory.
    Build {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.2)]
        k1: f64,
        #[arg(long, default_value_t = 0.75)]
        b: f64,
    },
}

#[derive(Debug, Args)]
struct RetrieveArgs {
    #[arg(long)]
    memory: PathBuf,
    /// A dialogue file (JSON with inline embeddings), or the query text
    /// itself when `--embedding` is given.
    #[arg(long)]
    query: String,
    /// Query embedding as a JSON array, for a plain-text query.
    #[arg(long)]
    embedding: Option<String>,
    /// Encoder weights file; defaults to current-turn-only weights.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long = "L", default_value_t = 128)]
    pool_size: usize,
    #[arg(long, default_value_t = 0.6)]
    lambda_vec: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SelectMethod {
    Ldra,
    Topk,
    Mmr,
    Fps,
    Random,
    Oracle,
}

#[derive(Debug, Args)]
struct SelectArgs {
    /// Line-delimited pool as written by `retrieve`.
    #[arg(long)]
    pool: PathBuf,
    #[arg(long, value_enum, default_value = "ldra")]
    method: SelectMethod,
    #[arg(long = "K", default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 0.4)]
    tau: f64,
    #[arg(long, default_value_t = 1)]
    cap: usize,
    #[arg(long, default_value_t = 0.05)]
    mu: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    lambda_mmr: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ComposeArgs {
    /// Dialogue file (JSON).
    #[arg(long)]
    dialogue: PathBuf,
    /// Selection report as written by `select`.
    #[arg(long)]
    selection: PathBuf,
    /// Prompt token budget.
    #[arg(long)]
    budget: usize,
    /// `identity`, `reverse`, or a seed number.
    #[arg(long, default_value = "identity")]
    permute: String,
    /// Let the summary fill the remaining budget.
    #[arg(long)]
    fill: bool,
    /// Sectioned template file.
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VerifierKind {
    Mock,
    Endpoint,
}

#[derive(Debug, Args)]
struct DecideArgs {
    /// Prompt JSON from `compose`, or a plain-text prompt.
    #[arg(long)]
    prompt: PathBuf,
    /// One label per line.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, value_enum, default_value = "mock")]
    verifier: VerifierKind,
    #[arg(long, default_value_t = 1.0)]
    tau_c: f64,
    /// Gold label known to the mock verifier.
    #[arg(long)]
    gold: Option<String>,
    #[arg(long, default_value_t = 2.0)]
    margin: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    url: Option<String>,
    /// Environment variable holding the bearer token.
    #[arg(long)]
    token_env: Option<String>,
    #[arg(long, default_value_t = 30.0)]
    timeout_secs: f64,
}

#[derive(Debug, Args)]
struct WorkloadArgs {
    /// Line-delimited workloads; overrides the single-workload flags.
    #[arg(long)]
    workloads: Option<PathBuf>,
    #[arg(long = "N", default_value_t = 1000)]
    memory_size: usize,
    #[arg(long, default_value_t = 8)]
    query_terms: usize,
    #[arg(long = "L", default_value_t = 128)]
    pool_size: usize,
    #[arg(long = "K", default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    turns: usize,
    #[arg(long, default_value_t = 300)]
    prompt_tokens: usize,
    #[arg(long, default_value_t = 4)]
    gen_tokens: usize,
}

#[derive(Debug, Subcommand)]
enum BudgetCmd {
    /// Modeled stage latencies, with P50/P90 over a workload set.
    Model {
        #[arg(long)]
        constants: Option<PathBuf>,
        #[command(flatten)]
        workload: WorkloadArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the constants to measured stage timings.
    Calibrate {
        /// Line-delimited `{workload, times}` samples.
        #[arg(long)]
        samples: PathBuf,
        /// Where to write the fitted constants file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Shrink (L, K) until the modeled latency fits the budget.
    Control {
        #[arg(long)]
        constants: Option<PathBuf>,
        #[command(flatten)]
        workload: WorkloadArgs,
        #[arg(long, default_value_t = 1)]
        cap: usize,
        /// Latency budget in seconds.
        #[arg(long)]
        budget: f64,
    },
}

#[derive(Debug, Args)]
pub struct EvalData {
    /// Experiment config file (TOML mirroring the experiment config).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Persisted memory. Without it, the default synthetic corpus is used.
    #[arg(long, requires = "instances")]
    memory: Option<PathBuf>,
    /// Line-delimited eval instances.
    #[arg(long, requires = "memory")]
    instances: Option<PathBuf>,
    /// Use only the first n instances.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum EvalCmd {
    /// Evaluate the configured method over the run seeds.
    Run {
        #[command(flatten)]
        data: EvalData,
    },
    /// Equal-token comparison of the selection arms.
    Fairness {
        #[command(flatten)]
        data: EvalData,
    },
    /// K x alpha x method sweep.
    Sweep {
        #[command(flatten)]
        data: EvalData,
        /// TOML file with `ks`, `alphas`, `methods`.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Grid search under a latency budget.
    Grid {
        #[command(flatten)]
        data: EvalData,
        /// TOML file with the per-knob value lists.
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Latency budget in seconds.
        #[arg(long, default_value_t = 0.25)]
        budget: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
    },
    /// Write a synthetic corpus.
    Synth {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        labels: usize,
        #[arg(long, default_value_t = 20)]
        per_label: usize,
        #[arg(long, default_value_t = 0.6)]
        ambiguity: f64,
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Memory(MemoryCmd::Build { input, out, k1, b }) => commands::memory_build(&input, &out, k1, b),
        Command::Retrieve(a) => commands::retrieve(&a),
        Command::Select(a) => commands::select(&a),
        Command::Compose(a) => commands::compose(&a),
        Command::Decide(a) => commands::decide(&a),
        Command::Budget(c) => commands::budget(c),
        Command::Eval(c) => eval_cmd::run(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
