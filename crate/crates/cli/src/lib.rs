//! Command implementations behind the `seqlab` binary: training with
//! structured metrics logs and checkpoints, corpus evaluation, symbolic
//! parameter/FLOP accounting, and one-technique-at-a-time ablations.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod train;

pub use checkpoint::{Checkpoint, OptimizerSnapshot};
pub use commands::{cmd_ablate, cmd_count, cmd_eval};
pub use config::{apply_ablation, AblationToggle, BatchScheme, RunConfig, ScheduleConfig};
pub use error::{CliError, Result};
pub use train::{corpus_bleu, load_pretrained_sources, run_training, TrainReport};
