use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mtlab::{run, Command, Overrides};

#[derive(Parser)]
#[command(name = "mtlab", version, about = "Multi-task adversarial attack lab")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Experiment config (TOML).
    #[arg(long, global = true, default_value = "configs/reference.toml")]
    config: PathBuf,
    /// Override the base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Train every grid model and write checkpoints.
    Train,
    /// Attack every checkpoint with the full driver x combiner x epsilon grid.
    Attack,
    /// Same grid as `attack`; emphasizes the epsilon curves.
    Sweep,
    /// Transferability across sharing levels and perturbation alignment.
    Diagnose,
    /// Adversarial training and the defense x attack robustness matrix.
    Advtrain,
    /// Rewrite records.json, tables and plots from the stored cells.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = match cli.command {
        Cmd::Train => Command::Train,
        Cmd::Attack => Command::Attack,
        Cmd::Sweep => Command::Sweep,
        Cmd::Diagnose => Command::Diagnose,
        Cmd::Advtrain => Command::Advtrain,
        Cmd::Report => Command::Report,
    };
    let overrides = Overrides { seed: cli.seed, out: cli.out, jobs: cli.jobs };
    match run(command, &cli.config, &overrides) {
        Ok(outcome) => {
            println!("{}", serde_json::to_string(&outcome).expect("outcome serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
