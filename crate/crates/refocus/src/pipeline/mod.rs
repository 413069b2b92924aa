//! On-disk pipeline: run configuration, artifact formats (JSONL records plus
//! a raw little-endian feature binary with a JSON sidecar), and the stage
//! functions the CLI subcommands call.

mod artifacts;
mod config;
mod stages;

pub use artifacts::{
    load_feedback, load_labels, load_predictions, load_refs, load_split, save_feedback,
    save_labels, save_predictions, save_refs, save_split, FeatureSidecar, Manifest, SCHEMA_VERSION,
};
pub use config::{FinetunePhase, PhaseConfig, RunConfig, Split, SplitSizes};
pub use stages::{
    cmd_eval, cmd_finetune, cmd_gen, cmd_make_feedback, cmd_make_labels, cmd_report,
    cmd_sample_refs, cmd_train_falm, cmd_train_host, load_stack, EvalArgs, EvalModeArg,
};
