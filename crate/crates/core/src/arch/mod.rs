//! Model families and hybrids behind one forward-loss / stepwise-decode
//! interface.

pub mod config;
mod convs2s;
mod hybrid;
pub mod presets;
mod rnmt;
mod transformer;

pub use config::{
    CascadedConfig, ConvLayerSpec, ConvStackConfig, DecoderConfig, EncoderConfig, Family,
    LossNorm, ModelConfig, MultiColumnConfig, PositionalMode, RnmtDecoderConfig,
    RnmtEncoderConfig, TransformerStackConfig,
};
pub use convs2s::{ConvDecoder, ConvEncoder, ConvState};
pub use hybrid::{load_subtree, CascadedEncoder, MultiColumnEncoder, Pretrained, TensorBundle};
pub use rnmt::{RnmtDecoder, RnmtEncoder, RnmtState};
pub use transformer::{TransformerDecoder, TransformerEncoder, TransformerState};

use crate::data::{Batch, EOS};
use crate::error::{Error, Result};
use crate::param::{Fwd, ParamBuilder, ParamStore, StoreMode};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug)]
pub enum Encoder {
    Rnmt(RnmtEncoder),
    Transformer(TransformerEncoder),
    Conv(ConvEncoder),
    Cascaded(CascadedEncoder),
    MultiColumn(MultiColumnEncoder),
}

#[derive(Debug)]
pub enum Decoder {
    Rnmt(RnmtDecoder),
    Transformer(TransformerDecoder),
    Conv(ConvDecoder),
}

/// Per-sentence encoder features, plus per-column features for multi-column
/// encoders.
pub struct Encoded {
    pub sentences: Vec<Var>,
    pub dim: usize,
    pub columns: Option<Vec<Vec<Var>>>,
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

enum Logits {
    /// One `[B, vocab]` var per target step (batched recurrent decoders).
    PerStep(Vec<Var>),
    /// One `[L_j, vocab]` var per sentence.
    PerSentence(Vec<Var>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub tokens: usize,
    pub correct: usize,
}

impl EvalMetrics {
    pub fn token_accuracy(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.correct as f64 / self.tokens as f64
        }
    }
}

impl Model {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Model> {
        Model::build_full(config, seed, StoreMode::Alloc, Some(&Pretrained::default()))
    }

    pub fn build_with_pretrained(config: &ModelConfig, seed: u64, pretrained: &Pretrained) -> Result<Model> {
        Model::build_full(config, seed, StoreMode::Alloc, Some(pretrained))
    }

    /// Symbolic instantiation: same builder path, no weight allocation.
    pub fn build_symbolic(config: &ModelConfig, seed: u64) -> Result<Model> {
        Model::build_full(config, seed, StoreMode::CountOnly, None)
    }

    /// Allocate without pretrained sources: freeze flags are applied but no
    /// column values load. For checkpoint restoration, where every value is
    /// overwritten immediately afterwards.
    pub fn build_unloaded(config: &ModelConfig, seed: u64) -> Result<Model> {
        Model::build_full(config, seed, StoreMode::Alloc, None)
    }

    fn build_full(
        config: &ModelConfig,
        seed: u64,
        mode: StoreMode,
        pretrained: Option<&Pretrained>,
    ) -> Result<Model> {
        config.validate()?;
        let vocab = config.vocab_size;
        let ln = config.layer_norm;
        let enc_dim = config.encoder_output_dim();
        let mut store = ParamStore::new(mode);
        let mut b = ParamBuilder::new(&mut store, seed);

        let encoder = b.scoped("encoder", |b| -> Result<Encoder> {
            Ok(match &config.encoder {
                EncoderConfig::Rnmt(c) => Encoder::Rnmt(RnmtEncoder::build(b, c, vocab, ln)),
                EncoderConfig::Transformer(c) => {
                    Encoder::Transformer(TransformerEncoder::build(b, c, vocab, ln)?)
                }
                EncoderConfig::Conv(c) => Encoder::Conv(ConvEncoder::build(b, c, vocab)),
                EncoderConfig::Cascaded(c) => {
                    Encoder::Cascaded(CascadedEncoder::build(b, c, vocab, ln)?)
                }
                EncoderConfig::MultiColumn(c) => {
                    Encoder::MultiColumn(MultiColumnEncoder::build(b, c, vocab, enc_dim, ln)?)
                }
            })
        })?;
        let decoder = b.scoped("decoder", |b| -> Result<Decoder> {
            Ok(match &config.decoder {
                DecoderConfig::Rnmt(c) => {
                    Decoder::Rnmt(RnmtDecoder::build(b, c, vocab, enc_dim, ln)?)
                }
                DecoderConfig::Transformer(c) => {
                    Decoder::Transformer(TransformerDecoder::build(b, c, vocab, enc_dim, ln)?)
                }
                DecoderConfig::Conv(c) => Decoder::Conv(ConvDecoder::build(b, c, vocab, enc_dim)),
            })
        })?;
        drop(b);

        if mode == StoreMode::Alloc {
            if let Some(sources) = pretrained {
                match &config.encoder {
                    EncoderConfig::Cascaded(_) => {
                        CascadedEncoder::load_pretrained(&mut store, sources)?;
                    }
                    EncoderConfig::MultiColumn(_) => {
                        MultiColumnEncoder::load_pretrained(&mut store, sources)?;
                    }
                    _ => {}
                }
            }
            match &config.encoder {
                EncoderConfig::Cascaded(c) if c.freeze => {
                    store.freeze_matching("encoder.rnmt.", true)?;
                }
                EncoderConfig::MultiColumn(c) if c.freeze_columns => {
                    store.freeze_matching("encoder.col_rnmt.", true)?;
                    store.freeze_matching("encoder.col_transformer.", true)?;
                }
                _ => {}
            }
        }
        Ok(Model { config: config.clone(), store, encoder, decoder })
    }

    pub fn vocab(&self) -> usize {
        self.config.vocab_size
    }

    pub fn total_params(&self) -> usize {
        self.store.total_params()
    }

    /// Freeze parameters by canonical-name prefix (or "all").
    pub fn freeze(&mut self, selector: &str) -> Result<usize> {
        self.store.freeze_matching(selector, true)
    }

    pub fn unfreeze(&mut self, selector: &str) -> Result<usize> {
        self.store.freeze_matching(selector, false)
    }

    pub fn encode(&self, fwd: &mut Fwd, batch: &Batch) -> Result<Encoded> {
        let drop = &self.config.dropout;
        let dim = self.config.encoder_output_dim();
        Ok(match &self.encoder {
            Encoder::Rnmt(enc) => {
                Encoded { sentences: enc.encode(fwd, batch, drop)?, dim, columns: None }
            }
            Encoder::Transformer(enc) => {
                let mut sentences = Vec::with_capacity(batch.size());
                for (row, &len) in batch.src.iter().zip(&batch.src_lens) {
                    sentences.push(enc.encode_sentence(fwd, &row[..len], drop)?);
                }
                Encoded { sentences, dim, columns: None }
            }
            Encoder::Conv(enc) => {
                let mut sentences = Vec::with_capacity(batch.size());
                for (row, &len) in batch.src.iter().zip(&batch.src_lens) {
                    sentences.push(enc.encode_sentence(fwd, &row[..len], drop)?);
                }
                Encoded { sentences, dim, columns: None }
            }
            Encoder::Cascaded(enc) => {
                Encoded { sentences: enc.encode(fwd, batch, drop)?, dim, columns: None }
            }
            Encoder::MultiColumn(enc) => {
                let (merged, columns) = enc.encode(fwd, batch, drop)?;
                Encoded { sentences: merged, dim, columns: Some(columns) }
            }
        })
    }

    fn conv_grad_scale(&self) -> Option<f64> {
        match &self.encoder {
            Encoder::Conv(e) => e.grad_scale,
            _ => None,
        }
    }

    fn teacher_logits(&self, fwd: &mut Fwd, batch: &Batch) -> Result<Logits> {
        let encoded = self.encode(fwd, batch)?;
        let drop = &self.config.dropout;
        Ok(match &self.decoder {
            Decoder::Rnmt(dec) => {
                Logits::PerStep(dec.teacher_forced(fwd, &encoded.sentences, batch, drop)?)
            }
            Decoder::Transformer(dec) => {
                let mut per = Vec::with_capacity(batch.size());
                for (j, enc) in encoded.sentences.iter().enumerate() {
                    let targets = &batch.tgt[j][..batch.tgt_lens[j]];
                    per.push(dec.teacher_forced_sentence(fwd, *enc, targets, drop)?);
                }
                Logits::PerSentence(per)
            }
            Decoder::Conv(dec) => {
                let scale = self.conv_grad_scale();
                let mut per = Vec::with_capacity(batch.size());
                for (j, enc) in encoded.sentences.iter().enumerate() {
                    let targets = &batch.tgt[j][..batch.tgt_lens[j]];
                    per.push(dec.teacher_forced_sentence(fwd, *enc, targets, drop, scale)?);
                }
                Logits::PerSentence(per)
            }
        })
    }

    /// Teacher-forced label-smoothed loss, normalized per the configured
    /// scheme; returns the scalar loss var and the loss-bearing token count.
    pub fn forward_loss(&self, fwd: &mut Fwd, batch: &Batch) -> Result<(Var, usize)> {
        let tokens = batch.target_tokens();
        if tokens == 0 {
            return Err(Error::EmptyBatch);
        }
        let logits = self.teacher_logits(fwd, batch)?;
        let u = self.config.label_smoothing;
        let norm = self.config.resolved_loss_norm();
        let b = batch.size();
        let loss = match logits {
            Logits::PerStep(steps) => {
                let mut acc: Option<Var> = None;
                for (t, step_logits) in steps.iter().enumerate() {
                    let targets: Vec<usize> = batch.tgt.iter().map(|row| row[t]).collect();
                    let lp = fwd.tape.log_softmax(*step_logits)?;
                    let nll = fwd.tape.smoothed_nll(lp, &targets, u)?;
                    let weights: Vec<f64> = batch
                        .tgt_lens
                        .iter()
                        .map(|&len| {
                            if t < len {
                                match norm {
                                    LossNorm::Token => 1.0 / tokens as f64,
                                    LossNorm::Sentence => 1.0 / b as f64,
                                }
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    let w = fwd.tape.constant(Tensor { shape: vec![b, 1], data: weights });
                    let weighted = fwd.tape.mul(nll, w)?;
                    let s = fwd.tape.sum_all(weighted)?;
                    acc = Some(match acc {
                        Some(a) => fwd.tape.add(a, s)?,
                        None => s,
                    });
                }
                acc.ok_or(Error::EmptyBatch)?
            }
            Logits::PerSentence(per) => {
                let mut acc: Option<Var> = None;
                for (j, logits_j) in per.iter().enumerate() {
                    let targets = &batch.tgt[j][..batch.tgt_lens[j]];
                    let lp = fwd.tape.log_softmax(*logits_j)?;
                    let nll = fwd.tape.smoothed_nll(lp, targets, u)?;
                    let s = fwd.tape.sum_all(nll)?;
                    let scaled = match norm {
                        LossNorm::Token => fwd.tape.scale(s, 1.0 / tokens as f64)?,
                        LossNorm::Sentence => fwd.tape.scale(s, 1.0 / b as f64)?,
                    };
                    acc = Some(match acc {
                        Some(a) => fwd.tape.add(a, scaled)?,
                        None => scaled,
                    });
                }
                acc.ok_or(Error::EmptyBatch)?
            }
        };
        Ok((loss, tokens))
    }

    /// Teacher-forced logit rows `[sentence][step][vocab]` on a throwaway
    /// inference tape.
    pub fn teacher_forced_logit_rows(&self, batch: &Batch) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut tape = Tape::new();
        let mut fwd = Fwd::new(&mut tape, &self.store, false, 0);
        let logits = self.teacher_logits(&mut fwd, batch)?;
        let vocab = self.vocab();
        let mut out = vec![Vec::new(); batch.size()];
        match logits {
            Logits::PerStep(steps) => {
                for (t, var) in steps.iter().enumerate() {
                    let v = fwd.tape.value(*var);
                    for (j, rows) in out.iter_mut().enumerate() {
                        if t < batch.tgt_lens[j] {
                            rows.push(v.data[j * vocab..(j + 1) * vocab].to_vec());
                        }
                    }
                }
            }
            Logits::PerSentence(per) => {
                for (j, var) in per.iter().enumerate() {
                    let v = fwd.tape.value(*var);
                    out[j] = v.data.chunks(vocab).map(|c| c.to_vec()).collect();
                }
            }
        }
        Ok(out)
    }

    /// Inference-mode loss and teacher-forced token accuracy.
    pub fn eval_metrics(&self, batch: &Batch) -> Result<EvalMetrics> {
        let mut tape = Tape::new();
        let mut fwd = Fwd::new(&mut tape, &self.store, false, 0);
        let (loss_var, tokens) = self.forward_loss(&mut fwd, batch)?;
        let loss = fwd.tape.scalar_value(loss_var);
        let rows = self.teacher_forced_logit_rows(batch)?;
        let mut correct = 0;
        for (j, sentence) in rows.iter().enumerate() {
            for (t, logit_row) in sentence.iter().enumerate() {
                let argmax = logit_row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                if argmax == batch.tgt[j][t] {
                    correct += 1;
                }
            }
        }
        Ok(EvalMetrics { loss, tokens, correct })
    }

    /// Ordered canonical (name, tensor) snapshot of every parameter.
    pub fn param_bundle(&self) -> Vec<(String, Tensor)> {
        self.store
            .iter()
            .map(|(_, e)| (e.name.clone(), e.value.as_ref().expect("bundle of count-only store").clone()))
            .collect()
    }

    /// Load a complete snapshot: every parameter must be covered exactly
    /// once and no extra names may appear.
    pub fn load_bundle(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        if entries.len() != self.store.len() {
            return Err(Error::CheckpointIncompatible(format!(
                "checkpoint has {} tensors, model has {} parameters",
                entries.len(),
                self.store.len()
            )));
        }
        for (name, tensor) in entries {
            self.store.assign_by_name(name, tensor.clone())?;
        }
        Ok(())
    }

    pub fn bundle_map(&self) -> TensorBundle {
        self.param_bundle().into_iter().collect()
    }

    /// Open a stepwise decoding session for one source sentence.
    pub fn decode_session(&self, src: &[usize]) -> Result<DecodeSession<'_>> {
        DecodeSession::open(self, src)
    }
}

// spec-shaped per-family constructors; each validates the family tag

pub fn build_rnmt_plus(config: &ModelConfig, seed: u64) -> Result<Model> {
    expect_family(config, Family::RnmtPlus)?;
    Model::build(config, seed)
}

pub fn build_transformer(config: &ModelConfig, seed: u64) -> Result<Model> {
    expect_family(config, Family::Transformer)?;
    Model::build(config, seed)
}

pub fn build_convs2s_mini(config: &ModelConfig, seed: u64) -> Result<Model> {
    expect_family(config, Family::Convs2s)?;
    Model::build(config, seed)
}

pub fn build_hybrid(config: &ModelConfig, seed: u64) -> Result<Model> {
    expect_family(config, Family::Hybrid)?;
    Model::build(config, seed)
}

pub fn build_cascaded_encoder(config: &ModelConfig, seed: u64, pretrained: &Pretrained) -> Result<Model> {
    expect_family(config, Family::Cascaded)?;
    Model::build_with_pretrained(config, seed, pretrained)
}

pub fn build_multi_column_encoder(
    config: &ModelConfig,
    seed: u64,
    pretrained: &Pretrained,
) -> Result<Model> {
    expect_family(config, Family::MultiColumn)?;
    Model::build_with_pretrained(config, seed, pretrained)
}

fn expect_family(config: &ModelConfig, family: Family) -> Result<()> {
    if config.family != family {
        return Err(Error::ConfigInvalid(format!(
            "expected family {:?}, config declares {:?}",
            family, config.family
        )));
    }
    Ok(())
}

/// Decoder state for stepwise decoding, family-specific.
#[derive(Clone)]
pub enum DecState {
    Rnmt(RnmtState),
    Transformer(TransformerState),
    Conv(ConvState),
}

/// Stepwise decoding over one source sentence. All intermediate values live
/// on one session tape; parameters are bound once and reused across steps.
pub struct DecodeSession<'m> {
    model: &'m Model,
    tape: Tape,
    bindings: Vec<Option<Var>>,
    encoded: Var,
    rnmt_keys: Option<Var>,
    cross_kv: Option<Vec<(Var, Var)>>,
}

impl<'m> DecodeSession<'m> {
    fn open(model: &'m Model, src: &[usize]) -> Result<DecodeSession<'m>> {
        if src.is_empty() {
            return Err(Error::EmptySource);
        }
        let mut tape = Tape::new();
        let mut fwd = Fwd::new(&mut tape, &model.store, false, 0);
        let batch = Batch::from_pairs(&[crate::data::SentencePair::new(src.to_vec(), vec![EOS])])?;
        // the placeholder target is never read during encoding
        let encoded = model.encode(&mut fwd, &batch)?;
        let enc = encoded.sentences[0];
        let rnmt_keys = match &model.decoder {
            Decoder::Rnmt(dec) => Some(dec.attention.project_keys(&mut fwd, enc)?),
            _ => None,
        };
        let cross_kv = match &model.decoder {
            Decoder::Transformer(dec) => Some(dec.project_cross(&mut fwd, enc)?),
            _ => None,
        };
        let bindings = fwd.into_bindings();
        Ok(DecodeSession { model, tape, bindings, encoded: enc, rnmt_keys, cross_kv })
    }

    pub fn vocab(&self) -> usize {
        self.model.vocab()
    }

    pub fn start(&mut self) -> Result<DecState> {
        Ok(match &self.model.decoder {
            Decoder::Rnmt(dec) => {
                let mut fwd =
                    Fwd::resume(&mut self.tape, &self.model.store, std::mem::take(&mut self.bindings));
                let state = dec.zero_state(&mut fwd, 1);
                self.bindings = fwd.into_bindings();
                DecState::Rnmt(state)
            }
            Decoder::Transformer(dec) => DecState::Transformer(dec.start_state()),
            Decoder::Conv(dec) => DecState::Conv(dec.start_state()),
        })
    }

    /// Advance one step: feed `prev_token`, return log-probabilities over the
    /// vocabulary and the successor state.
    pub fn step(&mut self, state: &DecState, prev_token: usize) -> Result<(Vec<f64>, DecState)> {
        let mut fwd =
            Fwd::resume(&mut self.tape, &self.model.store, std::mem::take(&mut self.bindings));
        let drop = crate::nn::DropoutSpec::default();
        let out = match (&self.model.decoder, state) {
            (Decoder::Rnmt(dec), DecState::Rnmt(s)) => {
                let mut next = s.clone();
                let logits = dec.step(
                    &mut fwd,
                    &mut next,
                    &[prev_token],
                    std::slice::from_ref(&self.encoded),
                    std::slice::from_ref(self.rnmt_keys.as_ref().unwrap()),
                    None,
                    &drop,
                )?;
                (logits, DecState::Rnmt(next))
            }
            (Decoder::Transformer(dec), DecState::Transformer(s)) => {
                let (logits, next) =
                    dec.step(&mut fwd, s, prev_token, self.cross_kv.as_ref().unwrap())?;
                (logits, DecState::Transformer(next))
            }
            (Decoder::Conv(dec), DecState::Conv(s)) => {
                let (logits, next) = dec.step(&mut fwd, s, prev_token, self.encoded)?;
                (logits, DecState::Conv(next))
            }
            _ => {
                return Err(Error::ConfigInvalid("decode state does not match decoder".into()));
            }
        };
        let (logits, next) = out;
        let lp = fwd.tape.log_softmax(logits)?;
        let row = fwd.tape.value(lp).data.clone();
        self.bindings = fwd.into_bindings();
        Ok((row, next))
    }
}
