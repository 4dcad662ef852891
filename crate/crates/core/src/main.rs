use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use coremig::harness::{run_pipeline, run_stage, AppConfig, Stage, StageOutcome};

#[derive(Parser)]
#[command(
    name = "coremig",
    about = "Core-migration policy training, FSM distillation, and analysis pipeline"
)]
struct Cli {
    /// Config file (TOML); defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory holding all artifacts and the manifest
    #[arg(long, global = true, default_value = "runs/default")]
    run_dir: PathBuf,
    /// Override the config's top-level seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate workload traces and the profile catalog
    GenWorkloads,
    /// Check that every workload class lands in the target makespan band
    Calibrate,
    /// Train the policy with the two-phase curriculum
    Train,
    /// Collect the transition dataset from greedy policy rollouts
    Collect,
    /// Train the observation and hidden-state bottleneck networks
    TrainQbn,
    /// Extract, minimize, and validate the finite state machine
    Extract,
    /// Compare default, handcrafted, DRL, and FSM controllers
    Evaluate,
    /// Produce per-state fan and history statistics
    Interpret,
    /// Run all stages in order
    Pipeline {
        /// Stop after this stage
        #[arg(long)]
        stage: Option<String>,
    },
}

fn run(cli: Cli) -> coremig::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => AppConfig::load(path)?,
        None => {
            let mut c = AppConfig::default();
            c.normalize();
            c
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = 0;
        cfg.qbn.train.seed = 0;
        cfg.sim.seed = 0;
        cfg.normalize();
    }
    let single = |stage: Stage| -> coremig::Result<()> {
        let outcome = run_stage(&cfg, &cli.run_dir, stage)?;
        println!(
            "{} {}",
            stage.name(),
            if outcome == StageOutcome::Skipped {
                "skipped (up to date)"
            } else {
                "done"
            }
        );
        Ok(())
    };
    match cli.command {
        Command::GenWorkloads => single(Stage::GenWorkloads),
        Command::Calibrate => single(Stage::Calibrate),
        Command::Train => single(Stage::Train),
        Command::Collect => single(Stage::Collect),
        Command::TrainQbn => single(Stage::TrainQbn),
        Command::Extract => single(Stage::Extract),
        Command::Evaluate => single(Stage::Evaluate),
        Command::Interpret => single(Stage::Interpret),
        Command::Pipeline { stage } => {
            let through = stage.as_deref().map(str::parse).transpose()?;
            for (stage, outcome) in run_pipeline(&cfg, &cli.run_dir, through)? {
                println!(
                    "{} {}",
                    stage.name(),
                    if outcome == StageOutcome::Skipped {
                        "skipped (up to date)"
                    } else {
                        "done"
                    }
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // machine-readable failure line
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.to_string(), "kind": e.kind() })
            );
            ExitCode::FAILURE
        }
    }
}
