//! Command-line entry point for the footstep planning stack. One binary,
//! subcommand per stage: terrain generation, dataset labeling, classifier
//! and policy training, evaluation campaigns, MPC regression checks, and
//! plotting. File formats, flags and exit codes are documented in
//! MANIFEST.md at the repository root.

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use quadstep::error::Error;

mod cmd_eval;
mod cmd_gen_terrain;
mod cmd_label;
mod cmd_mpc_test;
mod cmd_plot;
mod cmd_train_classifier;
mod cmd_train_policy;
mod svg;
mod util;

#[derive(Parser)]
#[command(
    name = "quadstep",
    version,
    about = "Safety-masked footstep planning: terrain, labeling, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a terrain field file.
    GenTerrain(cmd_gen_terrain::GenTerrainArgs),
    /// Sample labeled foothold safety records into a dataset.
    Label(cmd_label::LabelArgs),
    /// Train the safety-mask classifier on a labeled dataset.
    TrainClassifier(cmd_train_classifier::TrainClassifierArgs),
    /// Train a footstep policy (masked or naive).
    TrainPolicy(cmd_train_policy::TrainPolicyArgs),
    /// Run an evaluation campaign and write the report tables.
    Eval(cmd_eval::EvalArgs),
    /// MPC regression scenarios with hard thresholds.
    MpcTest(cmd_mpc_test::MpcTestArgs),
    /// Render report CSVs as SVG plots.
    Plot(cmd_plot::PlotArgs),
}

/// 0 success, 2 configuration (bad flags, bad config file, malformed
/// input), 3 missing artifact, 4 numerical failure, 1 anything else.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Domain(_) | Error::Parse { .. } => 2,
        Error::MissingArtifact(_) => 3,
        Error::Numerical(_) | Error::State(_) => 4,
        Error::Io(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenTerrain(args) => cmd_gen_terrain::run(args),
        Command::Label(args) => cmd_label::run(args),
        Command::TrainClassifier(args) => cmd_train_classifier::run(args),
        Command::TrainPolicy(args) => cmd_train_policy::run(args),
        Command::Eval(args) => cmd_eval::run(args),
        Command::MpcTest(args) => cmd_mpc_test::run(args),
        Command::Plot(args) => cmd_plot::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
