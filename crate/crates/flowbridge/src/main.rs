//! `flowbridge` command line: toy data, training, alignment, sampling, evaluation.

mod commands;
mod config;
mod error;
mod tables;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "flowbridge", version, about = "Flow matching and Markov bridge models on toy pocket/ligand complexes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset with a stats sidecar.
    GenData(CommonArgs),
    /// Train a model, or continue training from a checkpoint.
    Train(CommonArgs),
    /// Preference-align a trained model.
    Align(CommonArgs),
    /// Fine-tune a trained model on preferred samples.
    Finetune(CommonArgs),
    /// Sample molecules for the contexts of a dataset.
    Sample {
        #[command(flatten)]
        common: CommonArgs,
        /// Keep the ligand on its true path and sample only context torsions.
        #[arg(long)]
        fixed_ligand: bool,
        /// Use the reference ligand size plus this many nodes.
        #[arg(long)]
        extra_nodes: Option<usize>,
    },
    /// Compare sample tables against a reference table.
    Eval(CommonArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Align(a) => commands::align(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Sample { common, fixed_ligand, extra_nodes } => commands::sample(common, *fixed_ligand, *extra_nodes),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("flowbridge: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
