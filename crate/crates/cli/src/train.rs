//! The training loop: synchronous replica steps under the configured
//! schedule, adaptive clipping, periodic dev evaluation with an append-only
//! metrics log, checkpointing, and the best-window report at the end.

use std::io::Write;
use std::path::{Path, PathBuf};

use seqlab_core::arch::{Model, Pretrained};
use seqlab_core::data::{
    batch_by_sentences, batch_by_tokens, gen_task, shuffle_pairs, Batch, SentencePair, Vocabulary,
};
use seqlab_core::decode::{
    beam_search, best_window_over, bleu, BleuOptions, WindowReport,
};
use seqlab_core::optim::{sync_replica_step, AdamState, GradNormStats, ReplicaGrads};
use seqlab_core::param::Fwd;
use seqlab_core::tensor::Tape;

use crate::checkpoint::{Checkpoint, OptimizerSnapshot};
use crate::config::{BatchScheme, RunConfig};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub bleu: f64,
    pub loss: f64,
    pub lr: f64,
    pub aborted_steps: u64,
    pub token_accuracy: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    /// False when training halted on non-finite forward values.
    pub completed: bool,
    pub halted_non_finite: bool,
    pub steps_run: u64,
    pub aborted_steps: u64,
    pub final_token_accuracy: f64,
    pub final_bleu: f64,
    pub best_window: Option<(WindowReport, usize)>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Held-out data seed offset; dev pairs never overlap the training stream.
const DEV_SEED_OFFSET: u64 = 0x0dE5;

pub fn load_pretrained_sources(run: &RunConfig) -> Result<Pretrained> {
    let mut out = Pretrained::default();
    if let Some(paths) = &run.pretrained {
        if let Some(p) = &paths.encoder {
            out.encoder = Some(Checkpoint::load(p)?.bundle());
        }
        if let Some(p) = &paths.transformer_column {
            out.transformer_column = Some(Checkpoint::load(p)?.bundle());
        }
    }
    Ok(out)
}

fn make_batches(pairs: &[SentencePair], scheme: BatchScheme) -> seqlab_core::Result<Vec<Batch>> {
    match scheme {
        BatchScheme::Sentences { size } => batch_by_sentences(pairs, size),
        BatchScheme::Tokens { budget } => batch_by_tokens(pairs, budget),
    }
}

/// BLEU of greedy/beam decodes against references over (a subset of) a
/// corpus.
pub fn corpus_bleu(
    model: &Model,
    vocab: &Vocabulary,
    pairs: &[SentencePair],
    beam: usize,
    max_len: usize,
    limit: usize,
) -> Result<f64> {
    let take = if limit == 0 { pairs.len() } else { limit.min(pairs.len()) };
    let mut hyps = Vec::with_capacity(take);
    let mut refs = Vec::with_capacity(take);
    for pair in &pairs[..take] {
        let mut session = model.decode_session(&pair.src).map_err(CliError::Core)?;
        let result = beam_search(&mut session, beam, max_len, false).map_err(CliError::Core)?;
        hyps.push(vocab.decode_ids(&result.tokens));
        refs.push(vocab.decode_ids(&pair.tgt));
    }
    bleu(&hyps, &refs, BleuOptions::default()).map_err(CliError::Core)
}

fn replica_grads(model: &Model, batch: &Batch, rng_seed: u64) -> seqlab_core::Result<ReplicaGrads> {
    let mut tape = Tape::new();
    let mut fwd = Fwd::new(&mut tape, &model.store, true, rng_seed);
    let (loss, tokens) = model.forward_loss(&mut fwd, batch)?;
    fwd.tape.backward(loss)?;
    let weight = match model.config.resolved_loss_norm() {
        seqlab_core::arch::LossNorm::Token => tokens as f64,
        seqlab_core::arch::LossNorm::Sentence => batch.size() as f64,
    };
    Ok(ReplicaGrads { loss: fwd.tape.scalar_value(loss), weight, grads: fwd.grads() })
}

pub fn run_training(run: &RunConfig) -> Result<TrainReport> {
    let (schedule, training, data) = run.require_training()?;
    let schedule = schedule.clone();
    let training = training.clone();
    let data = data.clone();
    let log_dir = run.resolved_log_dir();
    std::fs::create_dir_all(&log_dir)
        .map_err(|e| CliError::Io(format!("creating {}: {e}", log_dir.display())))?;
    let metrics_path = log_dir.join("metrics.jsonl");
    let checkpoint_path = log_dir.join("checkpoint.s2s");
    let mut metrics_file = std::fs::File::create(&metrics_path)
        .map_err(|e| CliError::Io(format!("creating {}: {e}", metrics_path.display())))?;

    let vocab = Vocabulary::synthetic(data.vocab_size).map_err(CliError::Core)?;
    let mut train_pairs = gen_task(
        data.task,
        data.train_pairs,
        (data.min_len, data.max_len),
        data.vocab_size,
        run.seed,
    )
    .map_err(CliError::Core)?;
    let dev_pairs = gen_task(
        data.task,
        data.dev_pairs,
        (data.min_len, data.max_len),
        data.vocab_size,
        run.seed ^ DEV_SEED_OFFSET,
    )
    .map_err(CliError::Core)?;
    let dev_batch = Batch::from_pairs(&dev_pairs).map_err(CliError::Core)?;

    let pretrained = load_pretrained_sources(run)?;
    let mut model =
        Model::build_with_pretrained(&run.model, run.seed, &pretrained).map_err(CliError::Core)?;
    let mut opt = AdamState::new(&model.store);
    let mut clip = GradNormStats::new(run.clip);

    if let Some(resume) = &training.resume_from {
        let ckpt = Checkpoint::load(resume)?;
        if ckpt.config != run.model {
            return Err(CliError::Core(seqlab_core::Error::CheckpointIncompatible(
                "resume checkpoint was written for a different model configuration".into(),
            )));
        }
        model.load_bundle(&ckpt.tensors).map_err(CliError::Core)?;
    }

    let mut epoch: u64 = 0;
    let mut queue: Vec<Batch> = Vec::new();
    let mut aborted: u64 = 0;
    let mut bleu_series: Vec<f64> = Vec::new();
    let mut halted = false;
    let mut steps_run = 0;

    'training: for step in 0..training.max_steps {
        // refill the batch queue per epoch with a deterministic shuffle
        let mut micro = Vec::with_capacity(training.replicas);
        for _ in 0..training.replicas {
            if queue.is_empty() {
                shuffle_pairs(&mut train_pairs, run.seed, epoch);
                queue = make_batches(&train_pairs, training.batch).map_err(CliError::Core)?;
                queue.reverse(); // pop from the front of the epoch order
                epoch += 1;
            }
            micro.push(queue.pop().expect("epoch batches nonempty"));
        }
        let lr = schedule
            .rate(step, training.replicas, crate::config::DecoderDim::decoder_dim(&run.model))
            .map_err(CliError::Core)?;

        let mut replicas = Vec::with_capacity(micro.len());
        for (i, batch) in micro.iter().enumerate() {
            let rng_seed = run
                .seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(step * training.replicas as u64 + i as u64);
            match replica_grads(&model, batch, rng_seed) {
                Ok(r) => replicas.push(r),
                Err(seqlab_core::Error::NonFiniteValue { op }) => {
                    // unstable run: record the halt and stop
                    let line = serde_json::json!({
                        "step": step,
                        "event": "halted_non_finite",
                        "op": op,
                        "aborted_steps": aborted,
                    });
                    writeln!(metrics_file, "{line}")
                        .map_err(|e| CliError::Io(format!("metrics write: {e}")))?;
                    halted = true;
                    break 'training;
                }
                Err(e) => return Err(CliError::Core(e)),
            }
        }
        let outcome =
            sync_replica_step(&mut model.store, &mut opt, &mut clip, lr, training.weight_decay, &replicas)
                .map_err(CliError::Core)?;
        if !outcome.applied {
            aborted += 1;
        }
        steps_run = step + 1;

        let is_eval = (step + 1) % training.eval_every == 0 || step + 1 == training.max_steps;
        if is_eval {
            let eval = model.eval_metrics(&dev_batch).map_err(CliError::Core)?;
            let score = corpus_bleu(
                &model,
                &vocab,
                &dev_pairs,
                1,
                training.max_decode_len,
                training.dev_bleu_subset,
            )?;
            let record = MetricsRecord {
                step: step + 1,
                bleu: score,
                loss: eval.loss,
                lr,
                aborted_steps: aborted,
                token_accuracy: eval.token_accuracy(),
            };
            let line = serde_json::to_string(&record)
                .map_err(|e| CliError::Io(format!("metrics serialization: {e}")))?;
            writeln!(metrics_file, "{line}")
                .map_err(|e| CliError::Io(format!("metrics write: {e}")))?;
            bleu_series.push(score);
            let stop = training
                .early_stop
                .map(|es| record.token_accuracy >= es.token_accuracy && record.bleu >= es.bleu)
                .unwrap_or(false);
            if stop {
                break 'training;
            }
        }
        if training.checkpoint_every > 0 && (step + 1) % training.checkpoint_every == 0 {
            save_checkpoint(&model, &opt, step + 1, &checkpoint_path)?;
        }
    }

    save_checkpoint(&model, &opt, steps_run, &checkpoint_path)?;

    // final held-out evaluation with the configured beam
    let (final_acc, final_bleu) = if halted {
        (0.0, 0.0)
    } else {
        let eval = model.eval_metrics(&dev_batch).map_err(CliError::Core)?;
        let score = corpus_bleu(&model, &vocab, &dev_pairs, training.eval_beam, training.max_decode_len, 0)?;
        (eval.token_accuracy(), score)
    };

    // best-window report over the dev BLEU series; a short series shrinks
    // the window to its length
    let best_window = if bleu_series.is_empty() {
        None
    } else {
        let w = training.window.min(bleu_series.len());
        Some((best_window_over(&bleu_series, w).map_err(CliError::Core)?, w))
    };

    Ok(TrainReport {
        completed: !halted,
        halted_non_finite: halted,
        steps_run,
        aborted_steps: aborted,
        final_token_accuracy: final_acc,
        final_bleu,
        best_window,
        metrics_path,
        checkpoint_path,
    })
}

fn save_checkpoint(model: &Model, opt: &AdamState, step: u64, path: &Path) -> Result<()> {
    let mut ckpt = Checkpoint::from_model(model, step);
    // parameters are what resume correctness needs; moment buffers restart
    ckpt.optimizer = Some(OptimizerSnapshot { step: opt.step, moments: Vec::new() });
    ckpt.save(path)
}
