use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use seqlab_cli::commands::{cmd_ablate, cmd_count, cmd_eval, print_count};
use seqlab_cli::config::RunConfig;
use seqlab_cli::train::run_training;

#[derive(Parser)]
#[command(name = "seqlab", about = "Desk-scale sequence-to-sequence laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML run configuration.
    Train {
        config: PathBuf,
    },
    /// Decode a source corpus with a checkpoint and report corpus BLEU.
    Eval {
        checkpoint: PathBuf,
        source: PathBuf,
        reference: PathBuf,
        #[arg(long, default_value_t = 4)]
        beam: usize,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
        /// Add-one smoothing on n-gram precisions (tiny corpora).
        #[arg(long)]
        smooth: bool,
        /// Write hypotheses to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter and FLOP accounting for a model configuration.
    Count {
        config: PathBuf,
        #[arg(long, default_value_t = 50)]
        src_len: usize,
        #[arg(long, default_value_t = 50)]
        tgt_len: usize,
    },
    /// Train with one technique removed.
    Ablate {
        config: PathBuf,
        /// One of: label_smoothing, multi_head, layer_norm, sync_training.
        #[arg(long)]
        drop: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> seqlab_cli::Result<()> {
    match cli.command {
        Command::Train { config } => {
            let run_cfg = RunConfig::load(&config)?;
            let report = run_training(&run_cfg)?;
            if report.halted_non_finite {
                println!("outcome: halted_non_finite after {} steps", report.steps_run);
            } else {
                println!(
                    "outcome: completed {} steps ({} aborted), token_accuracy {:.4}, BLEU {:.2}",
                    report.steps_run,
                    report.aborted_steps,
                    report.final_token_accuracy,
                    report.final_bleu
                );
                if let Some((window, width)) = &report.best_window {
                    println!(
                        "best window (width {width}): mean BLEU {:.2} ± {:.2} from eval #{}",
                        window.mean, window.std, window.start_index
                    );
                }
            }
            println!("metrics: {}", report.metrics_path.display());
            println!("checkpoint: {}", report.checkpoint_path.display());
            Ok(())
        }
        Command::Eval { checkpoint, source, reference, beam, max_len, smooth, out } => {
            let outcome =
                cmd_eval(&checkpoint, &source, &reference, beam, max_len, smooth, out.as_deref())?;
            println!("BLEU = {:.2} over {} sentences (beam {beam})", outcome.bleu, outcome.sentences);
            if let Some(p) = outcome.hypotheses_path {
                println!("hypotheses: {}", p.display());
            }
            Ok(())
        }
        Command::Count { config, src_len, tgt_len } => {
            let outcome = cmd_count(&config, src_len, tgt_len)?;
            print_count(&outcome, src_len, tgt_len);
            Ok(())
        }
        Command::Ablate { config, drop } => {
            let outcome = cmd_ablate(&config, &drop)?;
            if outcome.halted_non_finite {
                println!("ablation -{}: halted_non_finite (recorded)", outcome.toggle);
            } else if let Some(report) = &outcome.report {
                println!(
                    "ablation -{}: completed {} steps, token_accuracy {:.4}, BLEU {:.2}",
                    outcome.toggle, report.steps_run, report.final_token_accuracy, report.final_bleu
                );
            }
            Ok(())
        }
    }
}
