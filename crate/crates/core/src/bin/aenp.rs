//! Experiment runner CLI.
//!
//! Verbs: `train`, `eval`, `ablate-b`, `eqlab` drive a JSON experiment
//! config (with `--set dotted.path=value` overrides); `plot` renders a task
//! from an existing checkpoint. Exit codes: 0 success, 2 config error,
//! 3 numerical failure.

use aenp::report::{
    git_describe, load_config, plot_task, run_experiment, Experiment, ExperimentConfig, Meta,
};
use aenp::taskgen::{sample_task, Mode};
use aenp::training::Checkpoint;
use aenp::Error;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "aenp", about = "Approximately-equivariant neural process experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path overrides, e.g. --set train.lr=1e-3.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite a completed run with the same config hash.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and emit checkpoint, loss curve, and a task plot.
    Train(RunArgs),
    /// Evaluate an existing checkpoint into a results table.
    Eval(RunArgs),
    /// Train and evaluate across the configured bank sizes.
    AblateB(RunArgs),
    /// Run the operator-approximation lab.
    Eqlab(RunArgs),
    /// Render one task from a checkpoint as SVG.
    Plot {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Seed of the task to render.
        #[arg(long, default_value_t = 0)]
        task_seed: u64,
        /// Task distribution: id or ood.
        #[arg(long, default_value = "id")]
        mode: String,
        /// Output SVG path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default experiment config.
    InitConfig,
}

fn main() {
    let cli = Cli::parse();
    std::process::exit(match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    });
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Json(_) | Error::Io(_) => 2,
        _ => 3,
    }
}

fn run(cli: Cli) -> aenp::Result<()> {
    match cli.command {
        Command::Train(args) => run_verb(args, Experiment::Train),
        Command::Eval(args) => run_verb(args, Experiment::Eval),
        Command::AblateB(args) => run_verb(args, Experiment::AblateB),
        Command::Eqlab(args) => run_verb(args, Experiment::Eqlab),
        Command::Plot { checkpoint, task_seed, mode, out } => {
            let mode = match mode.as_str() {
                "id" => Mode::Id,
                "ood" => Mode::Ood,
                other => return Err(Error::Config(format!("unknown mode '{other}'"))),
            };
            let ckpt = Checkpoint::load(&checkpoint)?;
            let model = ckpt.model_instance()?;
            let task = sample_task(task_seed, mode, &ckpt.sampler, &ckpt.process)?;
            let meta = Meta {
                config_hash: ckpt.config_hash.clone(),
                git: git_describe(),
                seed: task_seed,
            };
            std::fs::write(&out, plot_task(&model, &task, &meta)?)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::InitConfig => {
            println!("{}", serde_json::to_string_pretty(&ExperimentConfig::default())?);
            Ok(())
        }
    }
}

fn run_verb(args: RunArgs, experiment: Experiment) -> aenp::Result<()> {
    let mut cfg = load_config(&args.config, &args.sets)?;
    cfg.experiment = experiment;
    if let Some(out) = args.out {
        cfg.output_dir = out;
    }
    let outcome = run_experiment(&cfg, args.force)?;
    println!("run complete: {}", outcome.dir.display());
    for artifact in outcome.artifacts {
        println!("  {}", artifact.display());
    }
    Ok(())
}
