//! `sqz`: generate corpora, train codebooks, build interest agents, compress
//! histories, run baselines, replay serving traffic and run experiments.

mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use commands::{CliError, Exit};

#[derive(Parser)]
#[command(name = "sqz", version, about = "Compression of ultra-long user behavior sequences")]
struct Cli {
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log filter, e.g. `info` or `sqz_core=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted clusters and user histories.
    Generate(commands::GenerateArgs),
    /// Train residual codebooks on a corpus' semantic embeddings.
    TrainCodebooks(commands::TrainArgs),
    /// Map every history event to its semantic id.
    Tokenize(commands::TokenizeArgs),
    /// Build per-user interest agents from tokenized histories.
    Vote(commands::VoteArgs),
    /// Route histories onto their agents.
    Compress(commands::CompressArgs),
    /// Compare patching, k-means and LSH grouping.
    BenchBaselines(commands::BaselineArgs),
    /// Write a synthetic request stream for `simulate-serving`.
    GenerateReplay(commands::ReplayArgs),
    /// Replay requests through vanilla and cached attention.
    SimulateServing(commands::ServingArgs),
    /// Run the full experiment pipeline from a config file.
    Eval(commands::EvalArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let filter = EnvFilter::try_new(&cli.log_level).unwrap_or_else(|_| EnvFilter::new("warn"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();

    let result = (|| -> Result<(), CliError> {
        if let Some(n) = cli.threads {
            if n == 0 {
                return Err(CliError::validation("--threads must be at least 1"));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::runtime(e.to_string()))?;
        }
        match cli.command {
            Command::Generate(a) => commands::generate(a),
            Command::TrainCodebooks(a) => commands::train(a),
            Command::Tokenize(a) => commands::tokenize(a),
            Command::Vote(a) => commands::vote(a),
            Command::Compress(a) => commands::compress(a),
            Command::BenchBaselines(a) => commands::bench_baselines(a),
            Command::GenerateReplay(a) => commands::generate_replay(a),
            Command::SimulateServing(a) => commands::simulate_serving(a),
            Command::Eval(a) => commands::eval(a),
        }
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(match e.exit {
                Exit::Validation => 2,
                Exit::Runtime => 1,
            })
        }
    }
}
