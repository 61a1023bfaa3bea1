//! Single command-line entry point: corpus tooling, the three training
//! stages, evaluation reports, the ablation ladder, and judge validation.

mod commands;
mod config;
mod errors;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "capalign",
    about = "Culture-conditioned humorous captioning: staged alignment and evaluation at desk scale",
    version
)]
struct Cli {
    /// Plain-text key-value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed; every stochastic component derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Judge backend: simulated | external.
    #[arg(long, global = true)]
    backend: Option<String>,
    /// Override one config key, e.g. --set stage2_steps=100. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Echo the resolved configuration and write nothing.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus tooling.
    Data {
        #[command(subcommand)]
        sub: DataCmd,
    },
    /// Training stages.
    Train {
        #[command(subcommand)]
        sub: TrainCmd,
    },
    /// Evaluation and analysis.
    Eval {
        #[command(subcommand)]
        sub: EvalCmd,
    },
}

#[derive(Subcommand)]
enum DataCmd {
    /// Load and validate a corpus directory.
    Validate {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Generate the synthetic desk-scale corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum TrainCmd {
    /// Supervised fine-tuning on Western-context captions.
    Stage1 {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Judge-ranked GRPO with the repulsion constraint.
    Stage2 {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Prior-stage checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Eastern adaptation over the replay mixture.
    Stage3 {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Prior-stage checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Hybrid human/judge evaluation of a checkpoint on the benchmark.
    Run {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// CSV of human scores: image_id,context,ir,cf,sr,ra,hu,cr,annotator.
        #[arg(long)]
        human_scores: Option<PathBuf>,
    },
    /// CF and overall under none/western/eastern conditions.
    Contexts {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the ablation ladder.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of base,sft,sft+grpo,sft+grpo+deg,full.
        #[arg(long)]
        variants: Option<String>,
    },
    /// Pairwise judge-reliability validation.
    JudgeValidate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), errors::CliError> {
    let config = commands::resolve_config(
        cli.config.as_ref(),
        cli.seed,
        cli.backend.as_deref(),
        &cli.overrides,
    )?;
    match cli.command {
        Command::Data { sub } => match sub {
            DataCmd::Validate { corpus } => {
                if cli.dry_run {
                    print!("{}", config.echo());
                    return Ok(());
                }
                commands::data_validate(&corpus)
            }
            DataCmd::Synth { out } => commands::data_synth(&config, &out, cli.dry_run),
        },
        Command::Train { sub } => match sub {
            TrainCmd::Stage1 { corpus, out } => {
                commands::train(1, &config, &corpus, &out, None, cli.dry_run)
            }
            TrainCmd::Stage2 { corpus, out, init } => {
                commands::train(2, &config, &corpus, &out, init.as_deref(), cli.dry_run)
            }
            TrainCmd::Stage3 { corpus, out, init } => {
                commands::train(3, &config, &corpus, &out, init.as_deref(), cli.dry_run)
            }
        },
        Command::Eval { sub } => match sub {
            EvalCmd::Run {
                checkpoint,
                corpus,
                out,
                human_scores,
            } => commands::eval_run(
                &config,
                &checkpoint,
                &corpus,
                &out,
                human_scores.as_deref(),
                cli.dry_run,
            ),
            EvalCmd::Contexts {
                checkpoint,
                corpus,
                out,
            } => commands::eval_contexts(&config, &checkpoint, &corpus, &out, cli.dry_run),
            EvalCmd::Ablate {
                corpus,
                out,
                variants,
            } => commands::eval_ablate(&config, &corpus, &out, variants.as_deref(), cli.dry_run),
            EvalCmd::JudgeValidate { corpus, out } => {
                commands::eval_judge_validate(&config, &corpus, &out, cli.dry_run)
            }
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.render());
            ExitCode::from(e.exit.clamp(0, 255) as u8)
        }
    }
}
