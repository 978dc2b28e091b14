//! Recurrent encoder/decoder stacks: bidirectional LSTM encoder layers with
//! concatenated directions and a final projection, and a unidirectional
//! decoder whose bottom layer drives one multi-head additive attention whose
//! context feeds every higher layer and (optionally) the softmax.
//!
//! Recurrence is batched over sentences with masked state updates so padded
//! positions carry state through unchanged and contribute exact zeros to
//! every gradient; attention runs per sentence over unpadded keys.

use crate::arch::config::{RnmtDecoderConfig, RnmtEncoderConfig};
use crate::data::{Batch, BOS};
use crate::error::{Error, Result};
use crate::nn::{AdditiveAttention, DropoutSpec, LstmCell};
use crate::param::{Fwd, Init, ParamBuilder, ParamId};
use crate::tensor::{Tensor, Var};

pub const WEIGHT_INIT: f64 = 0.04;

#[derive(Debug)]
pub struct RnmtEncoder {
    pub units: usize,
    pub out_dim: usize,
    pub embed_dim: usize,
    src_embed: ParamId,
    layers: Vec<(LstmCell, LstmCell)>,
    proj_w: ParamId,
    proj_b: ParamId,
    residual_start: usize,
}

/// Per-timestep keep masks at the state width, shared across layers.
struct StepMasks {
    keep: Vec<Var>,
    carry: Vec<Var>,
}

fn build_step_masks(fwd: &mut Fwd, lens: &[usize], t_max: usize, width: usize) -> StepMasks {
    let b = lens.len();
    let mut keep = Vec::with_capacity(t_max);
    let mut carry = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let mut k = vec![0.0; b * width];
        let mut c = vec![1.0; b * width];
        for (j, &len) in lens.iter().enumerate() {
            if t < len {
                k[j * width..(j + 1) * width].fill(1.0);
                c[j * width..(j + 1) * width].fill(0.0);
            }
        }
        keep.push(fwd.tape.constant(Tensor { shape: vec![b, width], data: k }));
        carry.push(fwd.tape.constant(Tensor { shape: vec![b, width], data: c }));
    }
    StepMasks { keep, carry }
}

/// `new ⊙ keep + old ⊙ carry`: rows past their sentence length hold state.
fn masked_update(fwd: &mut Fwd, new: Var, old: Var, keep: Var, carry: Var) -> Result<Var> {
    let a = fwd.tape.mul(new, keep)?;
    let b = fwd.tape.mul(old, carry)?;
    fwd.tape.add(a, b)
}

impl RnmtEncoder {
    pub fn build(
        b: &mut ParamBuilder,
        cfg: &RnmtEncoderConfig,
        vocab: usize,
        layer_norm: bool,
    ) -> RnmtEncoder {
        let out_dim = cfg.output_dim();
        let src_embed = b.param("src_embed", &[vocab, cfg.embed_dim], Init::Uniform(WEIGHT_INIT));
        let mut layers = Vec::with_capacity(cfg.layers);
        for li in 0..cfg.layers {
            let in_dim = if li == 0 { cfg.embed_dim } else { 2 * cfg.units };
            layers.push(b.scoped(&format!("layer{li}"), |b| {
                (
                    LstmCell::build(b, "fwd", in_dim, cfg.units, layer_norm, false),
                    LstmCell::build(b, "bwd", in_dim, cfg.units, layer_norm, false),
                )
            }));
        }
        let (proj_w, proj_b) = b.scoped("proj", |b| {
            (
                b.param("w", &[2 * cfg.units, out_dim], Init::Uniform(WEIGHT_INIT)),
                b.param("b", &[out_dim], Init::Const(0.0)),
            )
        });
        RnmtEncoder {
            units: cfg.units,
            out_dim,
            embed_dim: cfg.embed_dim,
            src_embed,
            layers,
            proj_w,
            proj_b,
            residual_start: cfg.residual_start,
        }
    }

    /// Batched encode; returns one `[L_j, out_dim]` feature matrix per
    /// sentence.
    pub fn encode(&self, fwd: &mut Fwd, batch: &Batch, drop: &DropoutSpec) -> Result<Vec<Var>> {
        let b = batch.size();
        let t_max = batch.max_src_len();
        if t_max == 0 {
            return Err(Error::EmptySequence);
        }
        let masks = build_step_masks(fwd, &batch.src_lens, t_max, self.units);

        // embedded inputs per timestep
        let embed = fwd.p(self.src_embed);
        let mut inputs: Vec<Var> = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let ids: Vec<usize> = batch.src.iter().map(|row| row[t]).collect();
            let x = fwd.tape.gather(embed, &ids)?;
            inputs.push(fwd.dropout(x, drop.input_p)?);
        }

        for (li, (fcell, bcell)) in self.layers.iter().enumerate() {
            let mut fwd_states = Vec::with_capacity(t_max);
            let (mut h, mut c) = fcell.zero_state(fwd, b);
            for t in 0..t_max {
                let (nh, nc) = fcell.step(fwd, inputs[t], h, c)?;
                h = masked_update(fwd, nh, h, masks.keep[t], masks.carry[t])?;
                c = masked_update(fwd, nc, c, masks.keep[t], masks.carry[t])?;
                fwd_states.push(h);
            }
            let (mut h, mut c) = bcell.zero_state(fwd, b);
            let mut bwd_states = vec![h; t_max];
            for t in (0..t_max).rev() {
                let (nh, nc) = bcell.step(fwd, inputs[t], h, c)?;
                h = masked_update(fwd, nh, h, masks.keep[t], masks.carry[t])?;
                c = masked_update(fwd, nc, c, masks.keep[t], masks.carry[t])?;
                bwd_states[t] = h;
            }
            let mut next = Vec::with_capacity(t_max);
            for t in 0..t_max {
                let both = fwd.tape.concat(&[fwd_states[t], bwd_states[t]], 1)?;
                let dropped = fwd.dropout(both, drop.residual_p)?;
                next.push(if li + 1 >= self.residual_start {
                    fwd.tape.add(dropped, inputs[t])?
                } else {
                    dropped
                });
            }
            inputs = next;
        }

        // projection per timestep, then per-sentence extraction at true length
        let proj_w = fwd.p(self.proj_w);
        let proj_b = fwd.p(self.proj_b);
        let mut projected = Vec::with_capacity(t_max);
        for x in &inputs {
            let p = fwd.tape.matmul(*x, proj_w)?;
            projected.push(fwd.tape.add_bias(p, proj_b)?);
        }
        let mut sentences = Vec::with_capacity(b);
        for (j, &len) in batch.src_lens.iter().enumerate() {
            let rows: Vec<Var> = (0..len)
                .map(|t| fwd.tape.narrow(projected[t], 0, j, 1))
                .collect::<Result<_>>()?;
            sentences.push(fwd.tape.concat(&rows, 0)?);
        }
        Ok(sentences)
    }
}

#[derive(Debug)]
pub struct RnmtDecoder {
    pub units: usize,
    pub ctx_dim: usize,
    pub vocab: usize,
    tgt_embed: ParamId,
    layers: Vec<LstmCell>,
    pub attention: AdditiveAttention,
    softmax_w: ParamId,
    softmax_b: ParamId,
    residual_start: usize,
    feed_ctx_softmax: bool,
}

/// Recurrent decode state: (h, c) per layer, as vars on the active tape.
#[derive(Clone)]
pub struct RnmtState {
    pub layers: Vec<(Var, Var)>,
}

impl RnmtDecoder {
    pub fn build(
        b: &mut ParamBuilder,
        cfg: &RnmtDecoderConfig,
        vocab: usize,
        ctx_dim: usize,
        layer_norm: bool,
    ) -> Result<RnmtDecoder> {
        let tgt_embed = b.param("tgt_embed", &[vocab, cfg.embed_dim], Init::Uniform(WEIGHT_INIT));
        let mut layers = Vec::with_capacity(cfg.layers);
        for li in 0..cfg.layers {
            let in_dim = if li == 0 { cfg.embed_dim } else { cfg.units + ctx_dim };
            layers.push(b.scoped(&format!("layer{li}"), |b| {
                LstmCell::build(b, "cell", in_dim, cfg.units, layer_norm, cfg.raw_output_gate)
            }));
        }
        let attention =
            AdditiveAttention::build(b, "attention", cfg.units, ctx_dim, cfg.attention_heads)?;
        let softmax_in = if cfg.feed_context_to_softmax { cfg.units + ctx_dim } else { cfg.units };
        let (softmax_w, softmax_b) = b.scoped("softmax", |b| {
            (
                b.param("w", &[softmax_in, vocab], Init::Uniform(WEIGHT_INIT)),
                b.param("b", &[vocab], Init::Const(0.0)),
            )
        });
        Ok(RnmtDecoder {
            units: cfg.units,
            ctx_dim,
            vocab,
            tgt_embed,
            layers,
            attention,
            softmax_w,
            softmax_b,
            residual_start: cfg.residual_start,
            feed_ctx_softmax: cfg.feed_context_to_softmax,
        })
    }

    pub fn zero_state(&self, fwd: &mut Fwd, batch: usize) -> RnmtState {
        RnmtState {
            layers: self.layers.iter().map(|cell| cell.zero_state(fwd, batch)).collect(),
        }
    }

    /// One batched step: embeds `tokens`, runs the bottom layer, computes the
    /// per-sentence attention context from the bottom output, feeds it to all
    /// higher layers, and returns the logits `[B, vocab]`.
    ///
    /// `active`, when given, marks rows whose context should be computed;
    /// inactive rows receive a zero context (their outputs carry no loss).
    pub fn step(
        &self,
        fwd: &mut Fwd,
        state: &mut RnmtState,
        tokens: &[usize],
        encoded: &[Var],
        keys_projected: &[Var],
        active: Option<&[bool]>,
        drop: &DropoutSpec,
    ) -> Result<Var> {
        let b = tokens.len();
        let embed = fwd.p(self.tgt_embed);
        let x = fwd.tape.gather(embed, tokens)?;
        let x = fwd.dropout(x, drop.input_p)?;

        let (h0, c0) = state.layers[0];
        let (nh, nc) = self.layers[0].step(fwd, x, h0, c0)?;
        state.layers[0] = (nh, nc);
        let bottom = fwd.dropout(nh, drop.residual_p)?;

        // per-sentence additive attention from the bottom layer's output
        let mut ctx_rows = Vec::with_capacity(b);
        let zero_ctx = fwd.tape.constant(Tensor::zeros(&[1, self.ctx_dim]));
        for j in 0..b {
            let run = active.map_or(true, |a| a[j]);
            if run {
                let q = fwd.tape.narrow(bottom, 0, j, 1)?;
                let (ctx, _) = self.attention.attend(
                    fwd,
                    q,
                    keys_projected[j],
                    encoded[j],
                    None,
                    drop.attention_p,
                )?;
                ctx_rows.push(ctx);
            } else {
                ctx_rows.push(zero_ctx);
            }
        }
        let ctx = fwd.tape.concat(&ctx_rows, 0)?;

        let mut prev = bottom;
        for (li, cell) in self.layers.iter().enumerate().skip(1) {
            let input = fwd.tape.concat(&[prev, ctx], 1)?;
            let (h, c) = state.layers[li];
            let (nh, nc) = cell.step(fwd, input, h, c)?;
            state.layers[li] = (nh, nc);
            let dropped = fwd.dropout(nh, drop.residual_p)?;
            prev = if li + 1 >= self.residual_start {
                fwd.tape.add(dropped, prev)?
            } else {
                dropped
            };
        }

        let softmax_in =
            if self.feed_ctx_softmax { fwd.tape.concat(&[prev, ctx], 1)? } else { prev };
        let w = fwd.p(self.softmax_w);
        let bias = fwd.p(self.softmax_b);
        let logits = fwd.tape.matmul(softmax_in, w)?;
        fwd.tape.add_bias(logits, bias)
    }

    /// Teacher-forced logits for a whole batch, one `[B, vocab]` var per
    /// target step. Decoder input at step t is BOS for t = 0, else target
    /// token t−1.
    pub fn teacher_forced(
        &self,
        fwd: &mut Fwd,
        encoded: &[Var],
        batch: &Batch,
        drop: &DropoutSpec,
    ) -> Result<Vec<Var>> {
        let b = batch.size();
        let t_max = batch.max_tgt_len();
        let keys: Vec<Var> = encoded
            .iter()
            .map(|&e| self.attention.project_keys(fwd, e))
            .collect::<Result<_>>()?;
        let mut state = self.zero_state(fwd, b);
        let mut logits = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let tokens: Vec<usize> = batch
                .tgt
                .iter()
                .map(|row| if t == 0 { BOS } else { row[t - 1] })
                .collect();
            let active: Vec<bool> = batch.tgt_lens.iter().map(|&l| t < l).collect();
            logits.push(self.step(fwd, &mut state, &tokens, encoded, &keys, Some(&active), drop)?);
        }
        Ok(logits)
    }
}
