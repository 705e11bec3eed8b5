use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gfm_retriever::cli::{self, QueryInput};
use gfm_retriever::config::RunConfig;
use gfm_retriever::Result;

#[derive(Parser)]
#[command(name = "gfmr", version, about = "Graph retriever with subgraph selection and path-aware prompts")]
struct Cli {
    /// JSON run configuration; defaults apply to every key left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `paths.out` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark into <out>/data.
    Synth,
    /// Resolve entities and build the entity-document index.
    Index,
    /// Pre-train the graph backbone.
    Pretrain,
    /// Train the subgraph selector on labeled queries.
    Finetune,
    /// Build prompts for one query or a file of queries.
    Retrieve(RetrieveArgs),
    /// Score retrieval against gold labels and a random baseline.
    Eval,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct RetrieveArgs {
    #[arg(long)]
    query: Option<String>,
    /// JSONL file, one query per line.
    #[arg(long)]
    queries: Option<PathBuf>,
}

fn run(args: Cli) -> Result<String> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = args.out {
        config.paths.out = out;
    }
    config.validate()?;
    match args.command {
        Command::Synth => cli::cmd_synth(&config),
        Command::Index => cli::cmd_index(&config),
        Command::Pretrain => cli::cmd_pretrain(&config),
        Command::Finetune => cli::cmd_finetune(&config),
        Command::Retrieve(r) => {
            let input = match (r.query, r.queries) {
                (Some(q), _) => QueryInput::Single(q),
                (None, Some(p)) => QueryInput::File(p),
                (None, None) => unreachable!("clap enforces one of --query/--queries"),
            };
            cli::cmd_retrieve(&config, &input)
        }
        Command::Eval => cli::cmd_eval(&config),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
