use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Domain-incremental learning with common and personalized prompts on a
/// frozen dual encoder.
#[derive(Parser)]
#[command(name = "cp-prompt", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the output directory from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize the manifest's datasets as DILD files.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Contrastively pretrain the backbone on the base corpus.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Override the pretraining seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and evaluate a strategy over the domain stream.
    Run {
        #[command(flatten)]
        common: Common,
        /// Strategy name, or `all` for every strategy.
        #[arg(long, default_value = "cp_prompt")]
        strategy: String,
        #[arg(long, default_value = "kmeans")]
        selector: String,
        /// Run only this seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// `KEY=V1,V2,...`, optionally preceded by a free-form label such as
        /// `prompt-length`.
        #[arg(long, num_args = 1..=2, value_names = ["KEY=VALUES"])]
        sweep: Vec<String>,
    },
    /// Average accuracy for every prompted layer range.
    LayerGrid {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "kmeans")]
        selector: String,
    },
    /// Write the class-token attention of each layer for one test sample.
    DumpAttention {
        #[command(flatten)]
        common: Common,
        /// Index into the domain's test split.
        #[arg(long)]
        sample: usize,
        /// 1-based domain id; its snapshot and test split are used.
        #[arg(long)]
        domain: usize,
        /// Seed whose cp_prompt bank to load.
        #[arg(long)]
        seed: Option<u64>,
        /// Prompt bank file; defaults to the cp_prompt run output.
        #[arg(long)]
        bank: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { common } => commands::generate(&common),
        Command::Pretrain { common, seed } => commands::pretrain(&common, seed),
        Command::Run {
            common,
            strategy,
            selector,
            seed,
            sweep,
        } => commands::run(&common, &strategy, &selector, seed, &sweep),
        Command::LayerGrid {
            common,
            seed,
            selector,
        } => commands::layer_grid(&common, seed, &selector),
        Command::DumpAttention {
            common,
            sample,
            domain,
            seed,
            bank,
        } => commands::dump_attention(&common, sample, domain, seed, bank),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = match e.downcast_ref::<cp_prompt::Error>() {
                Some(cp_prompt::Error::Usage(_) | cp_prompt::Error::Config(_)) => 2,
                Some(cp_prompt::Error::Training { .. }) => 3,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
