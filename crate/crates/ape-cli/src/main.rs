//! Command line front end for the post-editing toolkit.
//!
//! Results go to standard output, progress and warnings to standard error.
//! Exit codes: 0 success, 1 bad usage or settings, 2 failure while doing
//! the work, 3 training stopped on a non-finite loss.

mod commands;
mod config;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ape", version, about = "Corrects machine translation output with a trained editor")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a correction model on source/translation/correction triplets
    Train(commands::TrainArgs),
    /// Score a checkpoint against reference corrections
    Evaluate(commands::EvaluateArgs),
    /// Correct translations read from a tab-separated file
    Translate(commands::TranslateArgs),
    /// Train every decoder sharing variant and tabulate the results
    Ablate(commands::AblateArgs),
    /// Turn an external weight dump into a checkpoint
    ImportWeights(commands::ImportArgs),
    /// Write a small synthetic corpus for smoke tests
    MakeFixture(commands::FixtureArgs),
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match &cli.cmd {
        Cmd::Train(args) => commands::train_cmd(args),
        Cmd::Evaluate(args) => commands::evaluate_cmd(args),
        Cmd::Translate(args) => commands::translate_cmd(args),
        Cmd::Ablate(args) => commands::ablate_cmd(args),
        Cmd::ImportWeights(args) => commands::import_weights_cmd(args),
        Cmd::MakeFixture(args) => commands::make_fixture_cmd(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
