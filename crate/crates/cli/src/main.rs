//! `ramehr`: batch entry points for the retrieval-augmented co-training
//! pipeline.
//!
//! Typical run in an empty directory:
//!
//! ```text
//! ramehr synth && ramehr ingest && ramehr index && ramehr summarize --client stub
//! ramehr train && ramehr evaluate
//! ```

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ClientChoice, EmbedderChoice, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "ramehr", version, about = "Retrieval-augmented co-training for clinical code prediction")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory that relative paths resolve against.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Passages retrieved per code.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Weight of the augmented model in the blended prediction.
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Weight of the consistency loss.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true, value_enum)]
    client: Option<ClientChoice>,
    #[arg(long, global = true, value_enum)]
    embedder: Option<EmbedderChoice>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark into the working directory.
    Synth,
    /// Build the passage corpus from passage and triplet files.
    Ingest {
        /// Input files, replacing the configured list.
        #[arg(long = "input")]
        inputs: Vec<PathBuf>,
    },
    /// Embed the corpus into a flat index.
    Index,
    /// Write the top-k passages of every vocabulary code.
    Retrieve,
    /// Summarize retrieved knowledge for every code into the cache.
    Summarize,
    /// Co-train both models and write checkpoints and a loss log.
    Train,
    /// Score the test split with saved checkpoints.
    Evaluate,
}

fn run(cli: Cli) -> ramehr::Result<()> {
    let g = cli.global;
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        workdir: g.workdir,
        seed: g.seed,
        k: g.k,
        beta: g.beta,
        lambda: g.lambda,
        epochs: g.epochs,
        client: g.client,
        embedder: g.embedder,
    });
    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Ingest { inputs } => {
            if !inputs.is_empty() {
                cfg.paths.inputs = inputs;
            }
            commands::ingest_cmd(&cfg)
        }
        Command::Index => commands::index(&cfg),
        Command::Retrieve => commands::retrieve(&cfg),
        Command::Summarize => commands::summarize(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Evaluate => {
            let report = commands::evaluate_cmd(&cfg)?;
            println!("{}", report.to_json());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
