use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;
mod run;

use config::Settings;
use error::CliError;

#[derive(Parser)]
#[command(name = "isoclr", version, about = "Contrastive pre-training of mature-RNA encoders")]
struct Cli {
    /// TOML file with the same keys as the flags; flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble transcripts, encode tracks and pool homology sets.
    BuildDataset(Settings),
    /// Annotation summary as TSV.
    Stats(Settings),
    /// Contrastive pre-training on a built dataset.
    Train(Settings),
    /// Frozen embeddings of every transcript in a dataset.
    Embed(Settings),
    /// Linear (or multilabel logistic) probe on an embedding table.
    Probe(Settings),
    /// Supervised fine-tuning with a regression head.
    Finetune(Settings),
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    let (name, flags) = match &cli.command {
        Command::BuildDataset(s) => ("build-dataset", s),
        Command::Stats(s) => ("stats", s),
        Command::Train(s) => ("train", s),
        Command::Embed(s) => ("embed", s),
        Command::Probe(s) => ("probe", s),
        Command::Finetune(s) => ("finetune", s),
    };
    let mut settings = match &cli.config {
        Some(path) => Settings::from_file(path)?.overlaid(flags),
        None => flags.clone(),
    };
    let seed = settings.resolve_seed()?;
    match name {
        "build-dataset" => commands::build_dataset(&settings, seed),
        "stats" => commands::stats(&settings, seed),
        "train" => commands::train(&settings, seed),
        "embed" => commands::embed(&settings, seed),
        "probe" => commands::probe(&settings, seed),
        _ => commands::finetune(&settings, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(dir) => {
            eprintln!("run: {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::FAILURE
        }
    }
}
