//! Command-line front end: synthetic data generation, training, embedding,
//! indexing, search, evaluation, robustness evaluation and self-checks.

mod commands;
mod config;
mod output;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use csit::trainer::Preset;

use commands::{Common, Protocol, RobustArgs};
use config::Overrides;

#[derive(Parser)]
#[command(name = "csit", version = output::VERSION, about = "Session encoder training and conversational retrieval evaluation")]
struct Cli {
    /// TOML file with [train], [model], [synthetic] and [llm] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; created only when the command succeeds.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Retrieval depth or metric cutoff.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Paper,
    Desk,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Paper => Preset::Paper,
            PresetArg::Desk => Preset::Desk,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the seeded synthetic coreference task.
    GenSynthetic,
    /// Train an encoder and write a checkpoint and loss trace.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Mine hard negatives with this checkpoint before training.
        #[arg(long)]
        mine_with: Option<PathBuf>,
    },
    /// Embed passages or evaluation sessions.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "sessions", required_unless_present = "sessions")]
        passages: Option<PathBuf>,
        #[arg(long)]
        sessions: Option<PathBuf>,
    },
    /// Build a dense index over a corpus.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Retrieve the top k passages for a session and print TREC run lines.
    Search {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON file holding one session.
        #[arg(long)]
        session: PathBuf,
    },
    /// Score a run file against qrels.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
    },
    /// Evaluate under modified conversational context.
    RobustEval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reuse a prebuilt index instead of encoding the corpus.
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        protocol: Protocol,
        /// Use the provider in the config's [llm] section.
        #[arg(long)]
        llm: bool,
        /// Control condition: history responses stay the gold ones.
        #[arg(long, conflicts_with = "llm")]
        gold_responses: bool,
    },
    /// Run the gradient, mask, two-pass and metric oracle suites.
    Verify {
        /// Fewer random cases per suite.
        #[arg(long)]
        quick: bool,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let steps = match &cli.command {
        Command::Train { steps, .. } => *steps,
        _ => None,
    };
    let common = Common {
        config: cli.config,
        overrides: Overrides {
            preset: cli.preset.map(Preset::from),
            seed: cli.seed,
            steps,
        },
        out: cli.out,
        k: cli.k,
    };
    match &cli.command {
        Command::GenSynthetic => commands::gen_synthetic(&common),
        Command::Train {
            data,
            corpus,
            mine_with,
            ..
        } => commands::train(&common, data, corpus, mine_with.as_deref()),
        Command::Embed {
            checkpoint,
            passages,
            sessions,
        } => commands::embed(&common, checkpoint, passages.as_deref(), sessions.as_deref()),
        Command::Index { corpus, checkpoint } => commands::index(&common, corpus, checkpoint),
        Command::Search {
            index,
            checkpoint,
            session,
        } => commands::search(&common, index, checkpoint, session),
        Command::Eval { run, qrels } => commands::eval(&common, run, qrels),
        Command::RobustEval {
            dataset,
            qrels,
            corpus,
            checkpoint,
            index,
            protocol,
            llm,
            gold_responses,
        } => commands::robust_eval(
            &common,
            &RobustArgs {
                dataset,
                qrels,
                corpus,
                checkpoint,
                index: index.as_deref(),
                protocol: *protocol,
                llm: *llm,
                gold_responses: *gold_responses,
            },
        ),
        Command::Verify { quick } => commands::verify(&common, *quick),
    }
}
