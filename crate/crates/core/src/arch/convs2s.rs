//! Convolutional encoder/decoder stacks: conv1d + GLU layers with residual
//! connections and weight-normalized kernels, learned positional embeddings,
//! and one dot-product attention per decoder layer against the final encoder
//! output (in embedding space). Gradients flowing from each decoder
//! attention into the encoder features are scaled to stabilize training.

use crate::arch::config::ConvStackConfig;
use crate::data::BOS;
use crate::error::{Error, Result};
use crate::nn::{ConvGlu, DropoutSpec, LearnedPositions};
use crate::param::{Fwd, Init, ParamBuilder, ParamId};
use crate::tensor::Var;

pub const WEIGHT_INIT: f64 = 0.04;

#[derive(Debug)]
struct ConvBlock {
    conv: ConvGlu,
    /// Residual projection when the layer changes width (no bias).
    res_proj: Option<ParamId>,
}

impl ConvBlock {
    fn build(b: &mut ParamBuilder, name: &str, width: usize, d_in: usize, d_out: usize, causal: bool) -> ConvBlock {
        b.scoped(name, |b| ConvBlock {
            conv: ConvGlu::build(b, "glu", width, d_in, d_out, causal),
            res_proj: (d_in != d_out)
                .then(|| b.param("res_proj", &[d_in, d_out], Init::Uniform(WEIGHT_INIT))),
        })
    }

    fn forward(&self, fwd: &mut Fwd, x: Var, residual_p: f64) -> Result<Var> {
        let out = self.conv.forward(fwd, x)?;
        let out = fwd.dropout(out, residual_p)?;
        let res = match self.res_proj {
            Some(w) => {
                let wv = fwd.p(w);
                fwd.tape.matmul(x, wv)?
            }
            None => x,
        };
        fwd.tape.add(out, res)
    }
}

#[derive(Debug)]
pub struct ConvEncoder {
    pub embed_dim: usize,
    src_embed: ParamId,
    positions: LearnedPositions,
    input_proj: ParamId,
    input_bias: ParamId,
    blocks: Vec<ConvBlock>,
    output_proj: ParamId,
    output_bias: ParamId,
    pub grad_scale: Option<f64>,
}

impl ConvEncoder {
    pub fn build(b: &mut ParamBuilder, cfg: &ConvStackConfig, vocab: usize) -> ConvEncoder {
        let e = cfg.embed_dim;
        let src_embed = b.param("src_embed", &[vocab, e], Init::Uniform(WEIGHT_INIT));
        let positions = LearnedPositions::build(b, "pos", cfg.max_positions, e);
        let d_first = cfg.layers[0].units;
        let (input_proj, input_bias) = b.scoped("input", |b| {
            (
                b.param("w", &[e, d_first], Init::Uniform(WEIGHT_INIT)),
                b.param("b", &[d_first], Init::Const(0.0)),
            )
        });
        let mut blocks = Vec::with_capacity(cfg.layers.len());
        let mut d_in = d_first;
        for (li, spec) in cfg.layers.iter().enumerate() {
            blocks.push(ConvBlock::build(b, &format!("layer{li}"), spec.width, d_in, spec.units, false));
            d_in = spec.units;
        }
        let (output_proj, output_bias) = b.scoped("output", |b| {
            (
                b.param("w", &[d_in, e], Init::Uniform(WEIGHT_INIT)),
                b.param("b", &[e], Init::Const(0.0)),
            )
        });
        ConvEncoder {
            embed_dim: e,
            src_embed,
            positions,
            input_proj,
            input_bias,
            blocks,
            output_proj,
            output_bias,
            grad_scale: cfg.grad_scale,
        }
    }

    pub fn encode_sentence(&self, fwd: &mut Fwd, tokens: &[usize], drop: &DropoutSpec) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        let embed = fwd.p(self.src_embed);
        let x = fwd.tape.gather(embed, tokens)?;
        let pos = self.positions.lookup(fwd, 0, tokens.len())?;
        let x = fwd.tape.add(x, pos)?;
        let x = fwd.dropout(x, drop.input_p)?;
        let w = fwd.p(self.input_proj);
        let bias = fwd.p(self.input_bias);
        let x = fwd.tape.matmul(x, w)?;
        let mut x = fwd.tape.add_bias(x, bias)?;
        for block in &self.blocks {
            x = block.forward(fwd, x, drop.residual_p)?;
        }
        let w = fwd.p(self.output_proj);
        let bias = fwd.p(self.output_bias);
        let x = fwd.tape.matmul(x, w)?;
        fwd.tape.add_bias(x, bias)
    }
}

#[derive(Debug)]
struct ConvDecoderLayer {
    block: ConvBlock,
    /// Query projection into the encoder's embedding space.
    attn_q: ParamId,
    attn_q_bias: ParamId,
    /// Context projection back to the layer width.
    attn_out: ParamId,
    attn_out_bias: ParamId,
}

#[derive(Debug)]
pub struct ConvDecoder {
    pub embed_dim: usize,
    pub vocab: usize,
    tgt_embed: ParamId,
    positions: LearnedPositions,
    input_proj: ParamId,
    input_bias: ParamId,
    layers: Vec<ConvDecoderLayer>,
    output_proj: ParamId,
    output_bias: ParamId,
    softmax_w: ParamId,
    softmax_b: ParamId,
    enc_dim: usize,
}

/// Incremental decode state: per-layer input history (last width−1 rows)
/// plus the absolute position.
#[derive(Clone)]
pub struct ConvState {
    pub histories: Vec<Vec<Var>>,
    pub pos: usize,
}

impl ConvDecoder {
    pub fn build(b: &mut ParamBuilder, cfg: &ConvStackConfig, vocab: usize, enc_dim: usize) -> ConvDecoder {
        let e = cfg.embed_dim;
        let tgt_embed = b.param("tgt_embed", &[vocab, e], Init::Uniform(WEIGHT_INIT));
        let positions = LearnedPositions::build(b, "pos", cfg.max_positions, e);
        let d_first = cfg.layers[0].units;
        let (input_proj, input_bias) = b.scoped("input", |b| {
            (
                b.param("w", &[e, d_first], Init::Uniform(WEIGHT_INIT)),
                b.param("b", &[d_first], Init::Const(0.0)),
            )
        });
        let mut layers = Vec::with_capacity(cfg.layers.len());
        let mut d_in = d_first;
        for (li, spec) in cfg.layers.iter().enumerate() {
            layers.push(b.scoped(&format!("layer{li}"), |b| ConvDecoderLayer {
                block: ConvBlock::build(b, "conv", spec.width, d_in, spec.units, true),
                attn_q: b.param("attn_q", &[spec.units, enc_dim], Init::Uniform(WEIGHT_INIT)),
                attn_q_bias: b.param("attn_q_bias", &[enc_dim], Init::Const(0.0)),
                attn_out: b.param("attn_out", &[enc_dim, spec.units], Init::Uniform(WEIGHT_INIT)),
                attn_out_bias: b.param("attn_out_bias", &[spec.units], Init::Const(0.0)),

            }));
            d_in = spec.units;
        }
        let (output_proj, output_bias) = b.scoped("output", |b| {
            (
                b.param("w", &[d_in, e], Init::Uniform(WEIGHT_INIT)),
                b.param("b", &[e], Init::Const(0.0)),
            )
        });
        let (softmax_w, softmax_b) = b.scoped("softmax", |b| {
            (
                b.param("w", &[e, vocab], Init::Uniform(WEIGHT_INIT)),
                b.param("b", &[vocab], Init::Const(0.0)),
            )
        });
        ConvDecoder {
            embed_dim: e,
            vocab,
            tgt_embed,
            positions,
            input_proj,
            input_bias,
            layers,
            output_proj,
            output_bias,
            softmax_w,
            softmax_b,
            enc_dim,
        }
    }

    /// Dot-product attention of layer features `x [T, d]` against encoder
    /// features `[L, e]`, added residually.
    fn attend(
        &self,
        fwd: &mut Fwd,
        layer: &ConvDecoderLayer,
        x: Var,
        encoded: Var,
        attention_p: f64,
    ) -> Result<Var> {
        let wq = fwd.p(layer.attn_q);
        let bq = fwd.p(layer.attn_q_bias);
        let q = fwd.tape.matmul(x, wq)?;
        let q = fwd.tape.add_bias(q, bq)?;
        let enc_t = fwd.tape.transpose(encoded)?;
        let raw = fwd.tape.matmul(q, enc_t)?;
        let scores = fwd.tape.scale(raw, 1.0 / (self.enc_dim as f64).sqrt())?;
        let weights = fwd.tape.softmax(scores)?;
        let weights = fwd.dropout(weights, attention_p)?;
        let ctx = fwd.tape.matmul(weights, encoded)?;
        let wo = fwd.p(layer.attn_out);
        let bo = fwd.p(layer.attn_out_bias);
        let ctx = fwd.tape.matmul(ctx, wo)?;
        let ctx = fwd.tape.add_bias(ctx, bo)?;
        fwd.tape.add(x, ctx)
    }

    /// Teacher-forced logits `[L, vocab]` for one sentence. Each decoder
    /// layer's attention consumes a gradient-scaled view of the encoder
    /// features (`scale` defaults to 1/(2·layers)).
    pub fn teacher_forced_sentence(
        &self,
        fwd: &mut Fwd,
        encoded: Var,
        targets: &[usize],
        drop: &DropoutSpec,
        enc_grad_scale: Option<f64>,
    ) -> Result<Var> {
        let scale = enc_grad_scale.unwrap_or(1.0 / (2.0 * self.layers.len() as f64));
        let mut input_ids = Vec::with_capacity(targets.len());
        input_ids.push(BOS);
        input_ids.extend_from_slice(&targets[..targets.len() - 1]);

        let embed = fwd.p(self.tgt_embed);
        let x = fwd.tape.gather(embed, &input_ids)?;
        let pos = self.positions.lookup(fwd, 0, input_ids.len())?;
        let x = fwd.tape.add(x, pos)?;
        let x = fwd.dropout(x, drop.input_p)?;
        let w = fwd.p(self.input_proj);
        let bias = fwd.p(self.input_bias);
        let x = fwd.tape.matmul(x, w)?;
        let mut x = fwd.tape.add_bias(x, bias)?;
        for layer in &self.layers {
            x = layer.block.forward(fwd, x, drop.residual_p)?;
            let enc_view = fwd.tape.grad_scale(encoded, scale)?;
            x = self.attend(fwd, layer, x, enc_view, drop.attention_p)?;
        }
        let w = fwd.p(self.output_proj);
        let bias = fwd.p(self.output_bias);
        let x = fwd.tape.matmul(x, w)?;
        let x = fwd.tape.add_bias(x, bias)?;
        let w = fwd.p(self.softmax_w);
        let bias = fwd.p(self.softmax_b);
        let logits = fwd.tape.matmul(x, w)?;
        fwd.tape.add_bias(logits, bias)
    }

    pub fn start_state(&self) -> ConvState {
        ConvState { histories: vec![Vec::new(); self.layers.len()], pos: 0 }
    }

    /// One incremental step at inference: causal convolutions see only the
    /// per-layer history window.
    pub fn step(
        &self,
        fwd: &mut Fwd,
        state: &ConvState,
        token: usize,
        encoded: Var,
    ) -> Result<(Var, ConvState)> {
        let embed = fwd.p(self.tgt_embed);
        let x = fwd.tape.gather(embed, &[token])?;
        let pos = self.positions.lookup(fwd, state.pos, 1)?;
        let x = fwd.tape.add(x, pos)?;
        let w = fwd.p(self.input_proj);
        let bias = fwd.p(self.input_bias);
        let x = fwd.tape.matmul(x, w)?;
        let mut x = fwd.tape.add_bias(x, bias)?;

        let mut next = state.clone();
        next.pos += 1;
        for (li, layer) in self.layers.iter().enumerate() {
            // window = history ++ current row; forward_last left-pads with
            // zeros exactly like the causal training pass
            let width = layer.block.conv.width;
            let hist = &state.histories[li];
            let take = (width - 1).min(hist.len());
            let mut rows: Vec<Var> = hist[hist.len() - take..].to_vec();
            rows.push(x);
            let window = if rows.len() > 1 { fwd.tape.concat(&rows, 0)? } else { rows[0] };
            next.histories[li] = {
                let keep = width - 1;
                let mut h = hist.clone();
                h.push(x);
                if h.len() > keep {
                    h.drain(..h.len() - keep);
                }
                h
            };
            let conv = layer.block.conv.forward_last(fwd, window)?;
            let res = match layer.block.res_proj {
                Some(wp) => {
                    let wv = fwd.p(wp);
                    fwd.tape.matmul(x, wv)?
                }
                None => x,
            };
            let summed = fwd.tape.add(conv, res)?;
            x = self.attend(fwd, layer, summed, encoded, 0.0)?;
        }
        let w = fwd.p(self.output_proj);
        let bias = fwd.p(self.output_bias);
        let x = fwd.tape.matmul(x, w)?;
        let x = fwd.tape.add_bias(x, bias)?;
        let w = fwd.p(self.softmax_w);
        let bias = fwd.p(self.softmax_b);
        let logits = fwd.tape.matmul(x, w)?;
        let logits = fwd.tape.add_bias(logits, bias)?;
        Ok((logits, next))
    }
}
