//! The eval, count, and ablate commands; train lives in `train.rs`.

use std::io::Write;
use std::path::{Path, PathBuf};

use seqlab_core::data::Vocabulary;
use seqlab_core::decode::{
    beam_search, bleu, count_flops, count_params, BleuOptions, COUNT_CONVENTIONS,
    FLOP_CONVENTIONS,
};

use crate::checkpoint::Checkpoint;
use crate::config::{apply_ablation, AblationToggle, RunConfig};
use crate::error::{CliError, Result};
use crate::train::{run_training, TrainReport};

pub struct EvalOutcome {
    pub bleu: f64,
    pub sentences: usize,
    pub hypotheses_path: Option<PathBuf>,
}

/// Decode a source corpus with a checkpointed model and score against
/// references. Files are UTF-8, one whitespace-tokenized sentence per line.
pub fn cmd_eval(
    ckpt_path: &Path,
    src_path: &Path,
    ref_path: &Path,
    beam: usize,
    max_len: usize,
    smooth: bool,
    out_path: Option<&Path>,
) -> Result<EvalOutcome> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let model = ckpt.instantiate()?;
    let vocab = Vocabulary::synthetic(model.config.vocab_size).map_err(CliError::Core)?;

    let read = |p: &Path| -> Result<String> {
        std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("reading {}: {e}", p.display())))
    };
    let src_text = read(src_path)?;
    let ref_text = read(ref_path)?;
    let src_lines: Vec<&str> = src_text.lines().collect();
    let ref_lines: Vec<&str> = ref_text.lines().collect();
    if src_lines.is_empty() || src_lines.len() != ref_lines.len() {
        return Err(CliError::Core(seqlab_core::Error::EmptyCorpus));
    }

    let mut hyps: Vec<Vec<String>> = Vec::with_capacity(src_lines.len());
    for line in &src_lines {
        let ids = vocab.encode_line(line);
        let mut session = model.decode_session(&ids).map_err(CliError::Core)?;
        let best = beam_search(&mut session, beam, max_len, false).map_err(CliError::Core)?;
        hyps.push(vocab.decode_ids(&best.tokens));
    }
    let refs: Vec<Vec<String>> = ref_lines
        .iter()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect();
    let score = bleu(&hyps, &refs, BleuOptions { max_n: 4, smooth }).map_err(CliError::Core)?;

    let hypotheses_path = match out_path {
        Some(p) => {
            let mut file = std::fs::File::create(p)
                .map_err(|e| CliError::Io(format!("creating {}: {e}", p.display())))?;
            for h in &hyps {
                writeln!(file, "{}", h.join(" "))
                    .map_err(|e| CliError::Io(format!("writing hypotheses: {e}")))?;
            }
            Some(p.to_path_buf())
        }
        None => None,
    };
    Ok(EvalOutcome { bleu: score, sentences: src_lines.len(), hypotheses_path })
}

pub struct CountOutcome {
    pub params: usize,
    pub flops: u64,
    pub components: Vec<(String, u64)>,
}

pub fn cmd_count(config_path: &Path, src_len: usize, tgt_len: usize) -> Result<CountOutcome> {
    let run = RunConfig::load(config_path)?;
    let params = count_params(&run.model).map_err(CliError::Core)?;
    let report = count_flops(&run.model, src_len, tgt_len).map_err(CliError::Core)?;
    Ok(CountOutcome { params, flops: report.total, components: report.components })
}

pub fn print_count(outcome: &CountOutcome, src_len: usize, tgt_len: usize) {
    println!("parameters: {} ({:.1}M)", outcome.params, outcome.params as f64 / 1e6);
    println!(
        "forward FLOPs at src={src_len}, tgt={tgt_len}: {} ({:.2}B)",
        outcome.flops,
        outcome.flops as f64 / 1e9
    );
    for (name, flops) in &outcome.components {
        println!("  {name}: {flops}");
    }
    println!("conventions:");
    println!("  {COUNT_CONVENTIONS}");
    println!("  {FLOP_CONVENTIONS}");
}

pub struct AblateOutcome {
    pub toggle: &'static str,
    pub report: Option<TrainReport>,
    pub halted_non_finite: bool,
}

/// Remove one technique and train the derived configuration. An unstable
/// run (non-finite forward values) is a recorded outcome, not a failure.
pub fn cmd_ablate(config_path: &Path, toggle_name: &str) -> Result<AblateOutcome> {
    let run = RunConfig::load(config_path)?;
    let toggle = AblationToggle::parse(toggle_name)?;
    let derived = apply_ablation(&run, toggle);
    let report = run_training(&derived)?;
    Ok(AblateOutcome {
        toggle: toggle.name(),
        halted_non_finite: report.halted_non_finite,
        report: Some(report),
    })
}
