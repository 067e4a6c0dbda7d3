use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use zoft::harness::{exit_code, run_command, Command, ExperimentConfig, RunOptions};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    TrainFinetuner,
    Finetune,
    Compare,
    SweepLr,
    Ablate,
    VerifyBounds,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::TrainFinetuner => Command::TrainFinetuner,
            Cmd::Finetune => Command::Finetune,
            Cmd::Compare => Command::Compare,
            Cmd::SweepLr => Command::SweepLr,
            Cmd::Ablate => Command::Ablate,
            Cmd::VerifyBounds => Command::VerifyBounds,
        }
    }
}

/// Zeroth-order fine-tuning experiments with learned block-wise perturbation scales.
#[derive(Debug, Parser)]
#[command(name = "zoft", version)]
struct Cli {
    #[arg(value_enum)]
    command: Cmd,
    /// INI experiment file.
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory, overriding `[experiment] out`.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Replaces the seed list and the meta-training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, env = "ZOFT_THREADS")]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let options = RunOptions { out: cli.out, seed: cli.seed, threads: cli.threads };
    let result = ExperimentConfig::load(&cli.config).and_then(|cfg| run_command(cli.command.into(), &cfg, &options));
    match result {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("zoft: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
