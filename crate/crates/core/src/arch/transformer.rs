//! Transformer encoder/decoder stacks wired for per-sentence processing:
//! embeddings scaled by √d, positions added, pre-norm layers, and the final
//! normalization after each stack.

use crate::arch::config::{PositionalMode, TransformerStackConfig};
use crate::data::BOS;
use crate::error::{Error, Result};
use crate::nn::{
    sinusoidal_positions, DropoutSpec, LayerNorm, LearnedPositions, TransformerDecoderLayer,
    TransformerEncoderLayer,
};
use crate::param::{Fwd, Init, ParamBuilder, ParamId};
use crate::tensor::Var;

pub const WEIGHT_INIT: f64 = 0.04;

#[derive(Debug)]
enum Positions {
    Sinusoidal,
    Learned(LearnedPositions),
    None,
}

impl Positions {
    fn build(b: &mut ParamBuilder, mode: PositionalMode, dim: usize) -> Positions {
        match mode {
            PositionalMode::Sinusoidal => Positions::Sinusoidal,
            PositionalMode::Learned { max_len } => {
                Positions::Learned(LearnedPositions::build(b, "pos", max_len, dim))
            }
            PositionalMode::None => Positions::None,
        }
    }

    fn add(&self, fwd: &mut Fwd, x: Var, start: usize, dim: usize) -> Result<Var> {
        let len = fwd.tape.shape(x)[0];
        match self {
            Positions::Sinusoidal => {
                let full = sinusoidal_positions(start + len, dim);
                let window = crate::tensor::Tensor {
                    shape: vec![len, dim],
                    data: full.data[start * dim..(start + len) * dim].to_vec(),
                };
                let pos = fwd.tape.constant(window);
                fwd.tape.add(x, pos)
            }
            Positions::Learned(table) => {
                let pos = table.lookup(fwd, start, len)?;
                fwd.tape.add(x, pos)
            }
            Positions::None => Ok(x),
        }
    }
}

#[derive(Debug)]
pub struct TransformerEncoder {
    pub d: usize,
    /// Absent for stack-only variants that consume existing features.
    src_embed: Option<ParamId>,
    layers: Vec<TransformerEncoderLayer>,
    final_ln: LayerNorm,
    positional: Positions,
}

impl TransformerEncoder {
    pub fn build(
        b: &mut ParamBuilder,
        cfg: &TransformerStackConfig,
        vocab: usize,
        layer_norm: bool,
    ) -> Result<TransformerEncoder> {
        let src_embed = b.param("src_embed", &[vocab, cfg.d_model], Init::Uniform(WEIGHT_INIT));
        let positional = Positions::build(b, cfg.positional, cfg.d_model);
        let mut layers = Vec::with_capacity(cfg.layers);
        for li in 0..cfg.layers {
            layers.push(TransformerEncoderLayer::build(
                b,
                &format!("layer{li}"),
                cfg.d_model,
                cfg.ff_dim,
                cfg.heads,
                layer_norm,
            )?);
        }
        let final_ln = LayerNorm::build(b, "final_ln", cfg.d_model, layer_norm);
        Ok(TransformerEncoder { d: cfg.d_model, src_embed: Some(src_embed), layers, final_ln, positional })
    }

    /// Stacked-on-top variant: no embedding, no positions; inputs are
    /// feature rows from an underlying encoder. Used by the cascaded hybrid,
    /// where position information already lives in the recurrent column.
    pub fn build_stack_only(
        b: &mut ParamBuilder,
        layers: usize,
        dim: usize,
        ff_dim: usize,
        heads: usize,
        layer_norm: bool,
    ) -> Result<TransformerEncoder> {
        let mut stack = Vec::with_capacity(layers);
        for li in 0..layers {
            stack.push(TransformerEncoderLayer::build(
                b,
                &format!("layer{li}"),
                dim,
                ff_dim,
                heads,
                layer_norm,
            )?);
        }
        let final_ln = LayerNorm::build(b, "final_ln", dim, layer_norm);
        Ok(TransformerEncoder {
            d: dim,
            src_embed: None,
            layers: stack,
            final_ln,
            positional: Positions::None,
        })
    }

    /// Encode one sentence of token ids into `[L, d]`.
    pub fn encode_sentence(&self, fwd: &mut Fwd, tokens: &[usize], drop: &DropoutSpec) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        let embed_id = self
            .src_embed
            .ok_or_else(|| Error::ConfigInvalid("stack-only encoder embeds no tokens".into()))?;
        let embed = fwd.p(embed_id);
        let x = fwd.tape.gather(embed, tokens)?;
        let x = fwd.tape.scale(x, (self.d as f64).sqrt())?;
        let x = self.positional.add(fwd, x, 0, self.d)?;
        let x = fwd.dropout(x, drop.input_p)?;
        self.forward_features(fwd, x, drop)
    }

    /// Run the layer stack (plus final normalization) over existing feature
    /// rows `[L, d]`.
    pub fn forward_features(&self, fwd: &mut Fwd, mut x: Var, drop: &DropoutSpec) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(fwd, x, drop)?;
        }
        self.final_ln.forward(fwd, x)
    }
}

#[derive(Debug)]
pub struct TransformerDecoder {
    pub d: usize,
    pub vocab: usize,
    tgt_embed: ParamId,
    layers: Vec<TransformerDecoderLayer>,
    final_ln: LayerNorm,
    positional: Positions,
    softmax_w: ParamId,
    softmax_b: ParamId,
}

/// Incremental decode state: per-layer cache of normalized self-attention
/// inputs, plus the current position.
#[derive(Clone)]
pub struct TransformerState {
    pub caches: Vec<Option<Var>>,
    pub pos: usize,
}

impl TransformerDecoder {
    pub fn build(
        b: &mut ParamBuilder,
        cfg: &TransformerStackConfig,
        vocab: usize,
        kv_dim: usize,
        layer_norm: bool,
    ) -> Result<TransformerDecoder> {
        let tgt_embed = b.param("tgt_embed", &[vocab, cfg.d_model], Init::Uniform(WEIGHT_INIT));
        let positional = Positions::build(b, cfg.positional, cfg.d_model);
        let mut layers = Vec::with_capacity(cfg.layers);
        for li in 0..cfg.layers {
            layers.push(TransformerDecoderLayer::build(
                b,
                &format!("layer{li}"),
                cfg.d_model,
                kv_dim,
                cfg.ff_dim,
                cfg.heads,
                layer_norm,
            )?);
        }
        let final_ln = LayerNorm::build(b, "final_ln", cfg.d_model, layer_norm);
        let (softmax_w, softmax_b) = b.scoped("softmax", |b| {
            (
                b.param("w", &[cfg.d_model, vocab], Init::Uniform(WEIGHT_INIT)),
                b.param("b", &[vocab], Init::Const(0.0)),
            )
        });
        Ok(TransformerDecoder {
            d: cfg.d_model,
            vocab,
            tgt_embed,
            layers,
            final_ln,
            positional,
            softmax_w,
            softmax_b,
        })
    }

    /// Teacher-forced logits `[L, vocab]` for one sentence with target ids
    /// `targets`; decoder input is BOS followed by targets[..L−1].
    pub fn teacher_forced_sentence(
        &self,
        fwd: &mut Fwd,
        encoded: Var,
        targets: &[usize],
        drop: &DropoutSpec,
    ) -> Result<Var> {
        let mut input_ids = Vec::with_capacity(targets.len());
        input_ids.push(BOS);
        input_ids.extend_from_slice(&targets[..targets.len() - 1]);
        let embed = fwd.p(self.tgt_embed);
        let x = fwd.tape.gather(embed, &input_ids)?;
        let x = fwd.tape.scale(x, (self.d as f64).sqrt())?;
        let x = self.positional.add(fwd, x, 0, self.d)?;
        let mut x = fwd.dropout(x, drop.input_p)?;
        for layer in &self.layers {
            x = layer.forward(fwd, x, encoded, drop)?;
        }
        let x = self.final_ln.forward(fwd, x)?;
        let w = fwd.p(self.softmax_w);
        let bias = fwd.p(self.softmax_b);
        let logits = fwd.tape.matmul(x, w)?;
        fwd.tape.add_bias(logits, bias)
    }

    pub fn start_state(&self) -> TransformerState {
        TransformerState { caches: vec![None; self.layers.len()], pos: 0 }
    }

    /// Pre-project encoder features to per-layer cross-attention keys/values.
    pub fn project_cross(&self, fwd: &mut Fwd, encoded: Var) -> Result<Vec<(Var, Var)>> {
        self.layers.iter().map(|l| l.cross_attn.project_kv(fwd, encoded)).collect()
    }

    /// One incremental step; returns logits `[1, vocab]` and the new state.
    pub fn step(
        &self,
        fwd: &mut Fwd,
        state: &TransformerState,
        token: usize,
        cross: &[(Var, Var)],
    ) -> Result<(Var, TransformerState)> {
        let embed = fwd.p(self.tgt_embed);
        let x = fwd.tape.gather(embed, &[token])?;
        let x = fwd.tape.scale(x, (self.d as f64).sqrt())?;
        let mut x = self.positional.add(fwd, x, state.pos, self.d)?;
        let mut next = state.clone();
        next.pos += 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let (out, normed) = layer.step(fwd, x, state.caches[li], cross[li].0, cross[li].1)?;
            next.caches[li] = Some(match state.caches[li] {
                Some(cache) => fwd.tape.concat(&[cache, normed], 0)?,
                None => normed,
            });
            x = out;
        }
        let x = self.final_ln.forward(fwd, x)?;
        let w = fwd.p(self.softmax_w);
        let bias = fwd.p(self.softmax_b);
        let logits = fwd.tape.matmul(x, w)?;
        let logits = fwd.tape.add_bias(logits, bias)?;
        Ok((logits, next))
    }
}
