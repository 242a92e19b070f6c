//! `evolm`: corpus and task generation, pretraining, self-evolution and
//! downstream adaptation from the command line.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Context;
use config::{Overrides, RunConfig};
use evolm::Error;

#[derive(Parser)]
#[command(name = "evolm", version, about = "Masked-LM pretraining with self-evolution and prompt transfer")]
struct Cli {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stage, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for relative paths in the config.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Encoder checkpoint to read, or to write for `pretrain`.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Source task name.
    #[arg(long, global = true)]
    source: Option<String>,
    /// Target task name.
    #[arg(long, global = true)]
    target: Option<String>,
    /// Training steps for every stage, overriding the config.
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary from a whitespace-tokenized corpus.
    BuildVocab {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        max_vocab: Option<usize>,
    },
    /// Generate the synthetic factual corpus, its slots and vocabulary.
    GenCorpus,
    /// Generate the source, target and domain-shift classification tasks.
    GenTasks,
    /// Masked-language-model pretraining.
    Pretrain {
        /// Continue from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Write the neglected-token index of a checkpoint without training.
    Scan,
    /// Self-evolution training on neglected tokens.
    Evolve,
    /// Fine-tune a classifier on the target task.
    Finetune,
    /// Tune a soft prompt on a task (default `source`).
    PromptTune,
    /// Distill a stored source prompt into a target prompt.
    PromptTransfer,
    /// Self-training on unlabeled target inputs (default task `shift`).
    Transductive,
    /// Score a checkpoint.
    Eval,
    /// Summarize metrics files as CSV.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Also draw the loss curves to this PNG.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> evolm::Result<()> {
    if let Command::Report { files, plot } = &cli.command {
        return commands::report(files, plot.as_deref());
    }
    let overrides = Overrides {
        seed: cli.seed,
        steps: cli.steps,
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.out, &overrides)?;
    let ctx = Context {
        cfg,
        out: cli.out.clone(),
        checkpoint: cli.checkpoint.clone(),
        source: cli.source.clone(),
        target: cli.target.clone(),
    };
    match &cli.command {
        Command::BuildVocab { corpus, max_vocab } => commands::build_vocab_cmd(&ctx, corpus.as_deref(), *max_vocab),
        Command::GenCorpus => commands::gen_corpus(&ctx),
        Command::GenTasks => commands::gen_tasks(&ctx),
        Command::Pretrain { from } => commands::pretrain_cmd(&ctx, from.as_deref()),
        Command::Scan => commands::scan(&ctx),
        Command::Evolve => commands::evolve(&ctx),
        Command::Finetune => commands::finetune(&ctx),
        Command::PromptTune => commands::prompt_tune_cmd(&ctx),
        Command::PromptTransfer => commands::prompt_transfer(&ctx),
        Command::Transductive => commands::transductive(&ctx),
        Command::Eval => commands::eval(&ctx),
        Command::Report { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EVOLM_LOG_LEVEL", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Divergence { .. }) { 2 } else { 1 })
        }
    }
}
