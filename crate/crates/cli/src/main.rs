//! `anncur`: build CUR indexes over black-box score matrices, retrieve with
//! them, and produce the recall tables used to compare retrieval methods.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "anncur", version, about)]
struct Cli {
    /// Worker threads for query and indexing fan-out.
    #[arg(long, global = true, env = "ANNCUR_WORKERS")]
    workers: Option<usize>,

    /// Output directory; relative input paths are resolved against it too.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic score matrix (ANCM file plus `.spec` sidecar).
    Gen(GenArgs),
    /// Build a CUR index and write it as an ANCI file.
    Index(IndexArgs),
    /// Retrieve (and optionally rerank) items for queries with a saved index.
    Query(QueryArgs),
    /// Top-k-Recall@k_r of a saved index on its non-anchor queries.
    Eval(EvalArgs),
    /// Recall sweeps over k_r, call budgets, or the anchor grid.
    Sweep(SweepArgs),
    /// Run several retrieval methods on the same queries and join their rows.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    LowRank,
    LowRankNoisy,
    Skewed,
    Featured,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long)]
    nq: usize,
    #[arg(long)]
    ni: usize,
    #[arg(long)]
    rank: usize,
    /// Noise standard deviation (low_rank_noisy).
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    /// Skew strength (skewed).
    #[arg(long, default_value_t = 0.0)]
    beta: f64,
    /// Skew exponent (skewed).
    #[arg(long, default_value_t = 1.0)]
    power: f64,
    /// File stem inside `--out`.
    #[arg(long, default_value = "scores")]
    name: String,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Scenario {
    /// low_rank_noisy, 1000 x 5000, rank 20, sigma 0.2.
    Noisy,
    /// featured, 1000 x 5000, rank 20.
    Featured,
}

#[derive(Debug, Args)]
struct OracleArgs {
    /// Score source: `.spec` sidecar (regenerates the synthetic oracle),
    /// `.csv`, or ANCM matrix.
    #[arg(long, conflicts_with = "scenario")]
    oracle: Option<PathBuf>,
    /// Built-in synthetic scenario, seeded from `--seed`.
    #[arg(long, value_enum)]
    scenario: Option<Scenario>,
    /// Item-item score matrix (ANCM or CSV) for matrix oracles.
    #[arg(long, requires = "oracle")]
    item_scores: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AnchorArgs {
    /// Number of anchor queries.
    #[arg(long)]
    k_q: usize,
    /// Number of anchor items.
    #[arg(long)]
    k_i: usize,
    /// Relative singular-value cutoff; default eps * max(rows, cols).
    #[arg(long)]
    rcond: Option<f64>,
}

#[derive(Debug, Args)]
struct IndexArgs {
    #[command(flatten)]
    oracle: OracleArgs,
    #[command(flatten)]
    anchors: AnchorArgs,
    #[arg(long, default_value = "index")]
    name: String,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[command(flatten)]
    oracle: OracleArgs,
    /// ANCI index file.
    #[arg(long)]
    index: PathBuf,
    /// Query ids; default all queries that are not index anchors.
    #[arg(long, value_delimiter = ',')]
    queries: Vec<usize>,
    /// Items retrieved by approximate score.
    #[arg(long)]
    k_r: usize,
    /// Rerank the retrieved items with exact scores and keep the top k.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value = "query")]
    name: String,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    oracle: OracleArgs,
    #[arg(long)]
    index: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 10])]
    k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [10, 50, 100, 200, 500])]
    k_r: Vec<usize>,
    #[arg(long, default_value = "eval")]
    name: String,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SweepModeArg {
    Kr,
    Budget,
    Grid,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GridMetricArg {
    Recall,
    FrobError,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    oracle: OracleArgs,
    #[arg(long, value_enum)]
    mode: SweepModeArg,
    /// Anchor queries (kr and budget modes).
    #[arg(long, default_value_t = 500)]
    k_q: usize,
    /// Anchor items; budget mode uses prefixes of these.
    #[arg(long, default_value_t = 450)]
    k_i: usize,
    #[arg(long)]
    rcond: Option<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 10])]
    k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [10, 50, 100, 200, 500])]
    k_r: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [50, 100, 200, 500])]
    budgets: Vec<usize>,
    /// Candidate k_i fractions of each budget.
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])]
    splits: Vec<f64>,
    /// Grid mode: anchor-query counts.
    #[arg(long, value_delimiter = ',', default_values_t = [50, 100, 200])]
    grid_k_q: Vec<usize>,
    /// Grid mode: anchor-item counts.
    #[arg(long, value_delimiter = ',', default_values_t = [25, 50, 100, 200])]
    grid_k_i: Vec<usize>,
    #[arg(long, value_enum, default_value = "recall")]
    metric: GridMetricArg,
    /// Grid mode: k of the recall metric.
    #[arg(long, default_value_t = 10)]
    grid_k: usize,
    /// Grid mode: k_r of the recall metric.
    #[arg(long, default_value_t = 100)]
    grid_k_r: usize,
    #[arg(long)]
    name: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CompareModeArg {
    Kr,
    Budget,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossArg {
    Match,
    Pair,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    oracle: OracleArgs,
    #[arg(long, value_enum, default_value = "budget")]
    mode: CompareModeArg,
    #[arg(long, value_delimiter = ',', default_values_t = ["anncur".to_string(), "fixed_item".into(), "item_cur".into(), "linear_de".into(), "precomputed".into()])]
    methods: Vec<String>,
    #[arg(long, default_value_t = 500)]
    k_q: usize,
    #[arg(long, default_value_t = 450)]
    k_i: usize,
    #[arg(long)]
    rcond: Option<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 10])]
    k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [10, 50, 100, 200, 500])]
    k_r: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [50, 100, 200, 500])]
    budgets: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])]
    splits: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    fixed_item_k_i: usize,
    #[arg(long, default_value_t = 50)]
    item_cur_k_ind: usize,
    #[arg(long, default_value_t = 50)]
    item_cur_k_query: usize,
    #[arg(long, value_enum, default_value = "pair")]
    de_loss: LossArg,
    #[arg(long, default_value_t = 100)]
    de_k_d: usize,
    /// Dual-encoder width; default 2 * rank.
    #[arg(long)]
    de_dim: Option<usize>,
    #[arg(long, default_value_t = 1e-2)]
    de_lr: f64,
    #[arg(long, default_value_t = 50)]
    de_epochs: usize,
    #[arg(long, default_value_t = 32)]
    de_batch: usize,
    /// Noise on latent features for the proxy precomputed embeddings.
    #[arg(long, default_value_t = 0.5)]
    proxy_noise: f64,
    /// Precomputed query embeddings (ANCM, d x n_queries).
    #[arg(long, requires = "item_emb")]
    query_emb: Option<PathBuf>,
    /// Precomputed item embeddings (ANCM, d x n_items).
    #[arg(long, requires = "query_emb")]
    item_emb: Option<PathBuf>,
    #[arg(long, default_value = "compare")]
    name: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} workers: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
