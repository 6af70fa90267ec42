//! `lanerope`: train, generate, evaluate and benchmark LaneRoPE models from a
//! JSON run configuration.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

/// A usage problem: bad flag values or a config lacking a required setting.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// The self-test found at least one failing invariant.
#[derive(Debug)]
pub struct SelftestFailed(pub usize);

impl std::fmt::Display for SelftestFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} self-test check(s) failed", self.0)
    }
}

impl std::error::Error for SelftestFailed {}

#[derive(Parser)]
#[command(
    name = "lanerope",
    version,
    about = "LaneRoPE multi-lane models: train, generate, eval, bench"
)]
struct Cli {
    /// Upper bound on worker threads (defaults to the available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Sft,
    Kto,
}

#[derive(Subcommand)]
enum Command {
    /// Fine-tune a model; writes a checkpoint and a metrics log.
    Train {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate lane groups for every query; writes JSON-lines results.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        /// Overrides the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Majority-vote accuracy over a results file.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        k: usize,
        /// Also write the summary to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time generation across lane counts; writes CSV.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthetic data generation and curation.
    Data {
        #[command(subcommand)]
        action: DataAction,
    },
    /// Run the built-in invariant suite.
    Selftest,
}

#[derive(Subcommand)]
enum DataAction {
    /// Split-fact collaboration episodes (and optionally evaluation queries).
    GenCollab {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grouped KTO preference data.
    GenKto {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Filter multi-assistant conversation records.
    Curate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if cause.is::<SelftestFailed>() {
            return 5;
        }
        if let Some(lanerope::Error::NonFinite(_)) = cause.downcast_ref::<lanerope::Error>() {
            return 4;
        }
    }
    3
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// The cause chain on one line, skipping causes their wrapper already quotes.
fn describe(err: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let msg = one_line(&cause.to_string());
        if parts.last().is_some_and(|p| p.ends_with(&msg)) {
            continue;
        }
        parts.push(msg);
    }
    parts.join(": ")
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let threads = match cli.threads {
        Some(0) => return Err(Usage("--threads must be at least 1".into()).into()),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    match cli.command {
        Command::Train { mode, config } => {
            commands::train(matches!(mode, Mode::Kto), &config, threads)
        }
        Command::Generate {
            config,
            queries,
            out,
        } => commands::generate(&config, &queries, out, threads),
        Command::Eval { results, k, out } => commands::eval(&results, k, out),
        Command::Bench { config, out } => commands::bench(&config, out),
        Command::Data { action } => match action {
            DataAction::GenCollab { config, out } => commands::gen_collab(&config, out),
            DataAction::GenKto { config, out } => commands::gen_kto(&config, out),
            DataAction::Curate { config, input, out } => commands::curate(&config, input, out),
        },
        Command::Selftest => commands::selftest(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version.
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!(
                "ERR: usage: {}",
                one_line(first.trim_start_matches("error: "))
            );
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERR: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
