//! `ctxbp`: train context models, compile constraints, sample, verify.
//!
//! Exit status: 0 success, 1 I/O or other error, 2 parse or usage error,
//! 3 infeasible constraints, 4 budget refusal, 5 check or invariant failure.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "ctxbp",
    version,
    about = "Exact constrained sampling from variable-order context models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Count a corpus into a model file.
    Train(TrainArgs),
    /// Draw constrained sequences.
    Sample(SampleArgs),
    /// Compare BP against brute-force enumeration.
    Exactness(ExactnessArgs),
    /// Per-order size and timing table.
    Bench(BenchArgs),
    /// Compare virtual and materialized augmentation.
    AugmentCheck(AugmentArgs),
    /// Policy success mass of an order stack.
    SuccessMass(MassArgs),
    /// Print the context graph.
    DumpGraph(DumpArgs),
    /// Compile a constraint document and print the acceptor.
    CompileConstraints(CompileArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum PolicyKind {
    /// Fixed top-order source, exact conditioning.
    Fixed,
    /// Order stack, longest feasible order.
    Stack,
    /// Order stack with singleton avoidance.
    StackSingleton,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Jsonl,
    Csv,
    Json,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Smoothing {
    /// Longest-suffix maximum likelihood.
    Mle,
    /// Witten-Bell interpolation.
    WittenBell,
}

/// Model and constraint inputs shared by most commands.
#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Training corpus (one sequence per line, optional `N*` multiplicity).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Model file written by `train`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Maximum order; defaults to the model's order.
    #[arg(short = 'K', long = "max-order")]
    pub k: Option<usize>,
    /// Edge-weight policy of the context graph.
    #[arg(long, value_enum, default_value_t = Smoothing::Mle)]
    pub smoothing: Smoothing,
}

#[derive(Args, Debug, Clone)]
pub struct ProblemArgs {
    /// Constraint document (JSON).
    #[arg(long)]
    pub constraints: Option<PathBuf>,
    /// Horizon when no constraint document is given.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Conditioning prefix, e.g. "0 1".
    #[arg(long, default_value = "")]
    pub prefix: String,
    /// Run the prefix through the acceptor before generating.
    #[arg(long)]
    pub feed_prefix: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(short = 'K', long = "max-order")]
    pub k: usize,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[arg(long, value_enum, default_value_t = PolicyKind::Fixed)]
    pub policy: PolicyKind,
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Include per-step traces in JSONL records.
    #[arg(long)]
    pub trace: bool,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExactnessArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Run this many seeded random tiny instances instead of one problem.
    #[arg(long)]
    pub random: Option<usize>,
    #[arg(long, default_value_t = 20000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Maximum number of enumerated sequences.
    #[arg(long, default_value_t = 1_000_000)]
    pub budget: u128,
    /// Largest TV distance allowed between the exact and empirical distributions.
    #[arg(long, default_value_t = 0.02)]
    pub tv_tolerance: f64,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Corpus file; a seeded synthetic corpus is used when absent.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 600)]
    pub tokens: usize,
    #[arg(long, default_value_t = 25)]
    pub alphabet: u32,
    #[arg(long, default_value_t = 4)]
    pub branching: usize,
    #[arg(long, default_value_t = 7)]
    pub corpus_seed: u64,
    /// Rows are produced for K = 1..=max-order.
    #[arg(short = 'K', long = "max-order", default_value_t = 6)]
    pub k: usize,
    /// Forbid every M-gram of the corpus.
    #[arg(long)]
    pub maxorder: Option<usize>,
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[arg(long, value_enum, default_value_t = PolicyKind::Stack)]
    pub policy: PolicyKind,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Group document: `{"kind":"shift","amounts":[..]}` or explicit maps.
    #[arg(long)]
    pub group: PathBuf,
    #[arg(short = 'K', long = "max-order")]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = Smoothing::Mle)]
    pub smoothing: Smoothing,
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[arg(long, value_enum, default_value_t = PolicyKind::Fixed)]
    pub policy: PolicyKind,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum MassModeArg {
    Exact,
    MonteCarlo,
}

#[derive(Args, Debug)]
pub struct MassArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[arg(long, value_enum, default_value_t = PolicyKind::Stack)]
    pub policy: PolicyKind,
    #[arg(long, value_enum, default_value_t = MassModeArg::Exact)]
    pub mode: MassModeArg,
    #[arg(long, default_value_t = 100_000)]
    pub trials: usize,
    /// Maximum joint states for the exact DP.
    #[arg(long, default_value_t = 1 << 22)]
    pub budget: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CompileArgs {
    #[arg(long)]
    pub constraints: PathBuf,
    /// Corpus for the alphabet and MAXORDER n-grams.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Model for the alphabet when no corpus is given.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Exactness(a) => commands::exactness(a),
        Command::Bench(a) => commands::bench(a),
        Command::AugmentCheck(a) => commands::augment_check(a),
        Command::SuccessMass(a) => commands::success_mass(a),
        Command::DumpGraph(a) => commands::dump_graph(a),
        Command::CompileConstraints(a) => commands::compile_constraints(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("ctxbp: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
