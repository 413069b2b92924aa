use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use refocus::pipeline::{
    cmd_eval, cmd_finetune, cmd_gen, cmd_make_feedback, cmd_make_labels, cmd_report,
    cmd_sample_refs, cmd_train_falm, cmd_train_host, EvalArgs, EvalModeArg, RunConfig, Split,
};

/// Interactive episodic-memory localization with user feedback, end to end
/// on synthetic data.
#[derive(Parser)]
#[command(name = "refocus", version, about)]
struct Cli {
    /// TOML run configuration; falls back to $REFOCUS_CONFIG_DIR/refocus.toml,
    /// then to built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Artifact directory shared by all stages.
    #[arg(long, global = true, default_value = "out")]
    dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/val/test worlds and the run manifest.
    Gen {
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample reference spans for a split.
    SampleRefs {
        #[arg(long, default_value = "train")]
        split: Split,
        /// Predictions JSONL for model-failure reference spans.
        #[arg(long)]
        preds: Option<PathBuf>,
    },
    /// Render feedback for a split's sampled reference spans.
    MakeFeedback {
        #[arg(long, default_value = "train")]
        split: Split,
    },
    /// Derive alignment labels for a split's feedback.
    MakeLabels {
        #[arg(long, default_value = "train")]
        split: Split,
    },
    /// Pretrain the feedback alignment module.
    TrainFalm {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Pretrain the host localizer on query-only data.
    TrainHost {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fine-tune host plus adapter with mixed sampling.
    Finetune {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        #[arg(long, default_value = "test")]
        split: Split,
        /// query-only | feedback | multi-turn | noisy
        #[arg(long, default_value = "feedback")]
        mode: EvalModeArg,
        /// Stack checkpoint (models/refocus.tckp) or a bare host checkpoint
        /// for query-only runs.
        #[arg(long)]
        stack: Option<PathBuf>,
        /// Force all-ones reweighting (neutralized adapter).
        #[arg(long)]
        bypass: bool,
        /// Max feedback turns for multi-turn mode.
        #[arg(long, default_value_t = 3)]
        n_max: usize,
        /// Random subsamplings per turn count.
        #[arg(long, default_value_t = 5)]
        samplings: usize,
        /// Also dump query-only predictions as JSONL.
        #[arg(long)]
        dump_preds: Option<PathBuf>,
    },
    /// Merge eval outputs into one table.
    Report,
}

fn run(cli: Cli) -> refocus::Result<()> {
    let cfg = RunConfig::resolve(cli.config.as_deref())?;
    match cli.command {
        Command::Gen { seed } => {
            let mut cfg = cfg;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            cmd_gen(&cfg, &cli.dir)
        }
        Command::SampleRefs { split, preds } => cmd_sample_refs(&cli.dir, split, preds.as_deref()),
        Command::MakeFeedback { split } => cmd_make_feedback(&cli.dir, split),
        Command::MakeLabels { split } => cmd_make_labels(&cli.dir, split),
        Command::TrainFalm { epochs } => cmd_train_falm(&cli.dir, epochs),
        Command::TrainHost { epochs } => cmd_train_host(&cli.dir, epochs),
        Command::Finetune { epochs } => cmd_finetune(&cli.dir, epochs),
        Command::Eval {
            split,
            mode,
            stack,
            bypass,
            n_max,
            samplings,
            dump_preds,
        } => {
            let stack = stack.unwrap_or_else(|| cli.dir.join("models/refocus.tckp"));
            cmd_eval(
                &cli.dir,
                &EvalArgs {
                    split,
                    mode,
                    stack,
                    bypass,
                    n_max,
                    samplings,
                    dump_preds,
                },
            )
        }
        Command::Report => cmd_report(&cli.dir),
    }
}

fn main() -> ExitCode {
    // usage errors exit 1 with the offending flag named by clap
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
