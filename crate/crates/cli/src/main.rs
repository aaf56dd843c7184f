//! Command-line runner: dataset generation, training, evaluation, analysis,
//! verification, and layer benchmarks, all reproducible from a RunConfig.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use phsa_cli::commands;

#[derive(Parser, Debug)]
#[command(
    name = "phsa",
    version,
    about = "Phonetic self-attention workbench: synthetic phoneme classification with analyzable attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset splits
    Gen(commands::gen::GenArgs),
    /// Train the frame classifier, writing checkpoints and history
    Train(commands::train::TrainArgs),
    /// Evaluate a checkpoint: frame accuracy and confusion matrix
    Eval(commands::eval::EvalArgs),
    /// Attention analysis: PAR, entropy, PReLU slopes, or term ablation
    Analyze(commands::analyze::AnalyzeArgs),
    /// Run the full property suite in check-grade precision
    Verify(commands::verify::VerifyArgs),
    /// Per-layer timing and parameter-count comparison
    Bench(commands::bench::BenchArgs),
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };

    let result = match &cli.command {
        Command::Gen(args) => commands::gen::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::Analyze(args) => commands::analyze::run(args),
        Command::Verify(args) => commands::verify::run(args),
        Command::Bench(args) => commands::bench::run(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
