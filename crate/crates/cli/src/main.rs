use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hybrid_lora_cli::run::{cmd_allocate, cmd_oracle, cmd_pipeline, cmd_probe, cmd_report, cmd_score, cmd_train};
use hybrid_lora_cli::{CliError, Overrides, RunConfig};
use hybrid_lora_core::allocator::Direction;
use hybrid_lora_core::{Objective, ScoreVariant};

/// Hybrid full-parameter / LoRA fine-tuning pipeline.
#[derive(Parser)]
#[command(name = "hybrid-lora", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the starting checkpoint, attach branches everywhere and run the probing warmup.
    Probe(StageArgs),
    /// Score every candidate module on the probed checkpoint.
    Score(StageArgs),
    /// Split modules into full fine-tuning and LoRA sets under the budget.
    Allocate(StageArgs),
    /// Train the hybrid model from the starting checkpoint.
    Train(StageArgs),
    /// Leave-one-branch-out perturbation scores and rank agreement.
    Oracle(StageArgs),
    /// probe, score, allocate and train in one go.
    Pipeline {
        #[command(flatten)]
        stage: StageArgs,
        /// Also run the perturbation oracle.
        #[arg(long)]
        oracle: bool,
    },
    /// Verify manifest digests and summarise a run directory.
    Report {
        /// Run directory.
        dir: PathBuf,
    },
}

#[derive(Args)]
struct StageArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory (relative paths resolve against $HYBRID_LORA_OUTPUT_ROOT).
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Replace this stage's existing outputs.
    #[arg(long)]
    overwrite: bool,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    r_fft: Option<f64>,
    /// Number of scoring batches.
    #[arg(long)]
    partitions: Option<usize>,
    #[arg(long)]
    variant: Option<ScoreVariant>,
    #[arg(long)]
    direction: Option<Direction>,
    #[arg(long)]
    objective: Option<Objective>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    total_steps: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Sets every seed at once.
    #[arg(long)]
    seed: Option<u64>,
}

impl StageArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            rank: self.rank,
            r_fft: self.r_fft,
            partitions: self.partitions,
            score_variant: self.variant,
            direction: self.direction,
            objective: self.objective,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
            eval_every: self.eval_every,
            seed: self.seed,
            output_dir: self.out.clone(),
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Probe(a) => cmd_probe(&a.resolve()?, a.overwrite).map(drop),
        Command::Score(a) => cmd_score(&a.resolve()?, a.overwrite).map(drop),
        Command::Allocate(a) => cmd_allocate(&a.resolve()?, a.overwrite).map(drop),
        Command::Train(a) => cmd_train(&a.resolve()?, a.overwrite).map(drop),
        Command::Oracle(a) => cmd_oracle(&a.resolve()?, a.overwrite).map(drop),
        Command::Pipeline { stage, oracle } => cmd_pipeline(&stage.resolve()?, stage.overwrite, oracle).map(drop),
        Command::Report { dir } => {
            print!("{}", cmd_report(&dir)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
