//! `cotcap` — the few-shot chained-prompt captioning pipeline.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing or stale
//! dependency artifact, 4 non-finite numerics; anything else is 1.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use cotcap::commands;
use cotcap::config_io::{config_hash, load_config};
use cotcap::error::Result;

#[derive(Parser)]
#[command(
    name = "cotcap",
    version,
    about = "Few-shot captioning with meta-learned chained visual prompts on a synthetic world"
)]
struct Cli {
    /// Experiment configuration (JSON document).
    #[arg(long, global = true, default_value = "configs/default.json")]
    config: PathBuf,
    /// Override the configured root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the configured episode-worker count (results are identical
    /// for any value).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Run directory for artifacts, reports, and the manifest.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic caption world: grammar, category split,
    /// frozen vision encoder, and train/test datasets.
    GenWorld,
    /// Pretrain the frozen language model on the world's caption language.
    PretrainLm,
    /// Meta-train the chained adaptors on meta-training categories.
    MetaTrain,
    /// Evaluate few-shot episodes on held-out categories.
    MetaTest {
        /// Evaluate in a reshuffled domain instead: same vocabulary, fresh
        /// verb-compatibility table and template pool.
        #[arg(long)]
        cross_domain: bool,
    },
    /// Train the non-episodic baseline and score it on the same episodes.
    Baseline,
    /// Meta-train and score every toggle combination (5 rows).
    Ablate,
    /// Score a captions file against the held-out dataset.
    Score {
        /// JSONL input, one {image_id, candidate, references} per line.
        #[arg(long)]
        input: PathBuf,
    },
}

fn run(cli: &Cli) -> Result<()> {
    let config = load_config(&cli.config, cli.seed, cli.workers)?;
    let hash = config_hash(&config)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::GenWorld => commands::cmd_gen_world(&config, &hash, out),
        Command::PretrainLm => commands::cmd_pretrain_lm(&config, &hash, out),
        Command::MetaTrain => commands::cmd_meta_train(&config, &hash, out),
        Command::MetaTest { cross_domain } => {
            commands::cmd_meta_test(&config, &hash, out, *cross_domain)
        }
        Command::Baseline => commands::cmd_baseline(&config, &hash, out),
        Command::Ablate => commands::cmd_ablate(&config, &hash, out),
        Command::Score { input } => commands::cmd_score(&config, &hash, out, input),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(&cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
