//! Pre-norm transformer building blocks. Every sublayer follows the strict
//! computation sequence normalize → transform → dropout → residual-add.

use crate::error::Result;
use crate::nn::{DotAttention, DropoutSpec, LayerNorm};
use crate::param::{Fwd, Init, ParamBuilder, ParamId};
use crate::tensor::Var;

pub const WEIGHT_INIT: f64 = 0.04;

/// `x + dropout(transform(layer_norm(x)))`.
pub fn sublayer<F>(fwd: &mut Fwd, x: Var, ln: &LayerNorm, residual_p: f64, transform: F) -> Result<Var>
where
    F: FnOnce(&mut Fwd, Var) -> Result<Var>,
{
    let normed = ln.forward(fwd, x)?;
    let transformed = transform(fwd, normed)?;
    let dropped = fwd.dropout(transformed, residual_p)?;
    fwd.tape.add(x, dropped)
}

/// Two-layer feed-forward block `W2 · relu_dropout(relu(W1·x + b1)) + b2`.
#[derive(Debug)]
pub struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl FeedForward {
    pub fn build(b: &mut ParamBuilder, name: &str, dim: usize, hidden: usize) -> FeedForward {
        b.scoped(name, |b| FeedForward {
            w1: b.param("w1", &[dim, hidden], Init::Uniform(WEIGHT_INIT)),
            b1: b.param("b1", &[hidden], Init::Const(0.0)),
            w2: b.param("w2", &[hidden, dim], Init::Uniform(WEIGHT_INIT)),
            b2: b.param("b2", &[dim], Init::Const(0.0)),
        })
    }

    pub fn forward(&self, fwd: &mut Fwd, x: Var, relu_p: f64) -> Result<Var> {
        let w1 = fwd.p(self.w1);
        let b1 = fwd.p(self.b1);
        let h = fwd.tape.matmul(x, w1)?;
        let h = fwd.tape.add_bias(h, b1)?;
        let h = fwd.tape.relu(h)?;
        let h = fwd.dropout(h, relu_p)?;
        let w2 = fwd.p(self.w2);
        let b2 = fwd.p(self.b2);
        let out = fwd.tape.matmul(h, w2)?;
        fwd.tape.add_bias(out, b2)
    }

    #[cfg(test)]
    pub(crate) fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }

    #[cfg(test)]
    pub(crate) fn weight_ids(&self) -> (ParamId, ParamId) {
        (self.w1, self.w2)
    }
}

/// Encoder layer: self-attention sublayer then feed-forward sublayer.
#[derive(Debug)]
pub struct TransformerEncoderLayer {
    pub self_attn: DotAttention,
    ln_attn: LayerNorm,
    pub ff: FeedForward,
    ln_ff: LayerNorm,
}

impl TransformerEncoderLayer {
    pub fn build(
        b: &mut ParamBuilder,
        name: &str,
        dim: usize,
        ff_hidden: usize,
        heads: usize,
        layer_norm: bool,
    ) -> Result<TransformerEncoderLayer> {
        b.scoped(name, |b| {
            Ok(TransformerEncoderLayer {
                self_attn: DotAttention::build(b, "self_attn", dim, dim, heads)?,
                ln_attn: LayerNorm::build(b, "ln_attn", dim, layer_norm),
                ff: FeedForward::build(b, "ff", dim, ff_hidden),
                ln_ff: LayerNorm::build(b, "ln_ff", dim, layer_norm),
            })
        })
    }

    pub fn forward(&self, fwd: &mut Fwd, x: Var, drop: &DropoutSpec) -> Result<Var> {
        let x = sublayer(fwd, x, &self.ln_attn, drop.residual_p, |fwd, n| {
            let (ctx, _) = self.self_attn.attend(fwd, n, n, false, None, drop.attention_p)?;
            Ok(ctx)
        })?;
        sublayer(fwd, x, &self.ln_ff, drop.residual_p, |fwd, n| {
            self.ff.forward(fwd, n, drop.relu_p)
        })
    }
}

/// Decoder layer: causal self-attention, cross-attention over the encoder
/// output, then feed-forward — each as a pre-norm sublayer.
#[derive(Debug)]
pub struct TransformerDecoderLayer {
    pub self_attn: DotAttention,
    ln_self: LayerNorm,
    pub cross_attn: DotAttention,
    ln_cross: LayerNorm,
    pub ff: FeedForward,
    ln_ff: LayerNorm,
}

impl TransformerDecoderLayer {
    pub fn build(
        b: &mut ParamBuilder,
        name: &str,
        dim: usize,
        kv_dim: usize,
        ff_hidden: usize,
        heads: usize,
        layer_norm: bool,
    ) -> Result<TransformerDecoderLayer> {
        b.scoped(name, |b| {
            Ok(TransformerDecoderLayer {
                self_attn: DotAttention::build(b, "self_attn", dim, dim, heads)?,
                ln_self: LayerNorm::build(b, "ln_self", dim, layer_norm),
                cross_attn: DotAttention::build(b, "cross_attn", dim, kv_dim, heads)?,
                ln_cross: LayerNorm::build(b, "ln_cross", dim, layer_norm),
                ff: FeedForward::build(b, "ff", dim, ff_hidden),
                ln_ff: LayerNorm::build(b, "ln_ff", dim, layer_norm),
            })
        })
    }

    /// Full-sequence teacher-forced pass.
    pub fn forward(&self, fwd: &mut Fwd, x: Var, encoded: Var, drop: &DropoutSpec) -> Result<Var> {
        let x = sublayer(fwd, x, &self.ln_self, drop.residual_p, |fwd, n| {
            let (ctx, _) = self.self_attn.attend(fwd, n, n, true, None, drop.attention_p)?;
            Ok(ctx)
        })?;
        let x = sublayer(fwd, x, &self.ln_cross, drop.residual_p, |fwd, n| {
            let (ctx, _) = self.cross_attn.attend(fwd, n, encoded, false, None, drop.attention_p)?;
            Ok(ctx)
        })?;
        sublayer(fwd, x, &self.ln_ff, drop.residual_p, |fwd, n| {
            self.ff.forward(fwd, n, drop.relu_p)
        })
    }

    /// Incremental step: the new position's row attends over cached
    /// self-attention keys (previous normalized inputs) plus itself, and over
    /// pre-projected encoder keys/values. Returns the output row and the
    /// normalized input row to append to the cache.
    pub fn step(
        &self,
        fwd: &mut Fwd,
        x_row: Var,
        self_cache: Option<Var>,
        cross_k: Var,
        cross_v: Var,
    ) -> Result<(Var, Var)> {
        let normed = self.ln_self.forward(fwd, x_row)?;
        let all = match self_cache {
            Some(cache) => fwd.tape.concat(&[cache, normed], 0)?,
            None => normed,
        };
        let (ctx, _) = self.self_attn.attend(fwd, normed, all, true, None, 0.0)?;
        let x = fwd.tape.add(x_row, ctx)?;

        let n2 = self.ln_cross.forward(fwd, x)?;
        let (ctx, _) = self.cross_attn.attend_projected(fwd, n2, cross_k, cross_v, false, None, 0.0)?;
        let x = fwd.tape.add(x, ctx)?;

        let n3 = self.ln_ff.forward(fwd, x)?;
        let ff = self.ff.forward(fwd, n3, 0.0)?;
        let out = fwd.tape.add(x, ff)?;
        Ok((out, normed))
    }
}
