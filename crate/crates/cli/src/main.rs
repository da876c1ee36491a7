mod commands;
mod report;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use archspace::eval::EvaluatorSpec;
use archspace::search::SearcherKind;
use archspace::Shape;
use clap::{Args, Parser, Subcommand};

/// Exit status plus message for a failed command.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Failure {
        Failure {
            code,
            message: message.into(),
        }
    }
}

pub const EXIT_PARSE: u8 = 2;
pub const EXIT_ROOT_SHAPE: u8 = 3;
pub const EXIT_PATH_MISMATCH: u8 = 4;
pub const EXIT_SHAPE: u8 = 5;
pub const EXIT_MANIFEST: u8 = 6;
pub const EXIT_IO: u8 = 1;

#[derive(Parser)]
#[command(name = "archspace", version, about = "Define, explore and search architecture spaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct ShapeArg {
    /// Input tensor shape, `H,W,C` or `D`.
    #[arg(long, default_value = "32,32,3")]
    pub input_shape: Shape,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a space file and count its models.
    Validate {
        space: PathBuf,
        #[command(flatten)]
        shape: ShapeArg,
        /// Exact counting stops above this many models.
        #[arg(long, default_value_t = 1_000_000)]
        cap: u128,
    },
    /// Write one path file per model, in depth-first order.
    Enumerate {
        space: PathBuf,
        #[command(flatten)]
        shape: ShapeArg,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compile a path to its graph IR (JSON on stdout).
    Compile {
        space: PathBuf,
        path: PathBuf,
        #[command(flatten)]
        shape: ShapeArg,
    },
    /// Run a searcher for some repetitions and record every evaluation.
    Search(SearchArgs),
    /// Aggregate run directories into CSV tables.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
    },
}

#[derive(Args)]
pub struct SearchArgs {
    pub space: PathBuf,
    #[command(flatten)]
    pub shape: ShapeArg,
    #[arg(long, default_value = "random", value_parser = parse_kind)]
    pub searcher: SearcherKind,
    #[arg(long, default_value_t = 64)]
    pub budget: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `linear:<seed>[:sigma]`, `prefix:<seed>`, `table:<file>` or `cmd:<program>[:timeout_s]`.
    #[arg(long, default_value = "prefix:0")]
    pub evaluator: EvaluatorSpec,
    #[arg(long, default_value_t = 1)]
    pub reps: usize,
    /// Defaults to a directory under $ARCHSPACE_RUN_DIR (or ./runs).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long, env = "ARCHSPACE_RUN_DIR", hide_env_values = true)]
    pub run_root: Option<PathBuf>,
    /// Leave wall-clock fields out so reruns are byte-identical.
    #[arg(long)]
    pub no_timing: bool,
    /// UCB exploration constant.
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long)]
    pub branch_factor: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub rollout_pool: Option<usize>,
    #[arg(long)]
    pub ngram_max: Option<usize>,
    #[arg(long)]
    pub ridge_lambda: Option<f64>,
}

fn parse_kind(s: &str) -> Result<SearcherKind, String> {
    s.parse()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { space, shape, cap } => commands::validate(&space, shape.input_shape, cap),
        Command::Enumerate {
            space,
            shape,
            limit,
            out,
        } => commands::enumerate_cmd(&space, shape.input_shape, limit, &out),
        Command::Compile { space, path, shape } => commands::compile_cmd(&space, &path, shape.input_shape),
        Command::Search(args) => run::search(&args),
        Command::Report { run_dirs } => report::report(&run_dirs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
