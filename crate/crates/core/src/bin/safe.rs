use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use safe_fusion::autodiff::Fault;
use safe_fusion::config::RunConfig;
use safe_fusion::harness::{self, Split};
use safe_fusion::{Error, Result};

#[derive(Parser)]
#[command(name = "safe", about = "Train and evaluate frame/event/prompt fusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FromCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    SoftmaxBackward,
    MulBackward,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic clip dataset with frames and events.
    SynthData(Common),
    /// Train one model and log per-epoch metrics.
    Train(Common),
    /// Score a split with a trained checkpoint.
    Eval(FromCheckpoint),
    /// Train every single-component-off pattern over several seeds.
    Ablate(Common),
    /// Eval top-1 for each entry of `frame_counts`.
    SweepFrames(Common),
    /// Eval top-1 for each prompt template.
    SweepPrompts(Common),
    /// Finite-difference check of primitives and the full model.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Break one backward rule to confirm the check catches it.
        #[arg(long, value_enum)]
        inject_fault: Option<FaultArg>,
    },
    /// Write the pooled classifier input of every clip as CSV.
    DumpEmbeddings(FromCheckpoint),
}

fn load(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn split(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    }
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::SynthData(c) => harness::synth_data(&load(&c)?),
        Command::Train(c) => harness::train_cmd(&load(&c)?),
        Command::Eval(a) => harness::eval_cmd(&load(&a.common)?, &a.checkpoint, split(a.split)),
        Command::Ablate(c) => harness::ablate(&load(&c)?),
        Command::SweepFrames(c) => harness::sweep_frames(&load(&c)?),
        Command::SweepPrompts(c) => harness::sweep_prompts(&load(&c)?),
        Command::GradCheck { common, inject_fault } => {
            let mut cfg = load(&common)?;
            if let Some(f) = inject_fault {
                cfg.grad_check.fault = Some(match f {
                    FaultArg::SoftmaxBackward => Fault::SoftmaxBackward,
                    FaultArg::MulBackward => Fault::MulBackward,
                });
            }
            harness::grad_check_cmd(&cfg)
        }
        Command::DumpEmbeddings(a) => harness::dump_embeddings(&load(&a.common)?, &a.checkpoint, split(a.split)),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary is serializable"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_status(&e))
        }
    }
}

fn exit_status(e: &Error) -> u8 {
    e.exit_code() as u8
}
