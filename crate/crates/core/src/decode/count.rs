//! Symbolic parameter and FLOP accounting.
//!
//! Parameter counts reuse the model builders in count-only mode, so the
//! symbolic number equals the allocation a real build would make, by
//! construction. FLOPs are forward-pass multiply-accumulate counts times
//! two, summed over matrix products, convolutions, attention score/context
//! products, and the output softmax projection; biases, nonlinearities,
//! softmax normalization, layer norm, and embedding lookups are ignored
//! (sub-percent at these scales).

use crate::arch::{
    ConvStackConfig, DecoderConfig, EncoderConfig, Model, ModelConfig, RnmtDecoderConfig,
    RnmtEncoderConfig, TransformerStackConfig,
};
use crate::error::Result;

pub const COUNT_CONVENTIONS: &str = "parameter counting: separate source-embedding, \
target-embedding, and softmax matrices (no tying); biases, layer-norm gains/biases, \
per-gate normalization, and weight-norm scales all counted; symbolic shapes, no allocation";

pub const FLOP_CONVENTIONS: &str = "FLOP counting: forward pass, 2 FLOPs per multiply-add; \
matrix products, convolutions, attention score/context products, and the softmax projection \
counted; biases, nonlinearities, softmax normalization, layer norm, and embedding lookups ignored";

/// Total trainable-parameter elements for a configuration, via a symbolic
/// (no-allocation) build.
pub fn count_params(config: &ModelConfig) -> Result<usize> {
    Ok(Model::build_symbolic(config, 0)?.total_params())
}

/// FLOPs of one matrix product `[m,k]·[k,n]`.
pub fn matmul_flops(m: usize, k: usize, n: usize) -> u64 {
    2 * (m as u64) * (k as u64) * (n as u64)
}

#[derive(Debug, Clone)]
pub struct FlopReport {
    pub total: u64,
    pub components: Vec<(String, u64)>,
}

impl FlopReport {
    fn push(&mut self, name: impl Into<String>, flops: u64) {
        self.total += flops;
        self.components.push((name.into(), flops));
    }
}

/// Forward-pass FLOPs at the given source/target lengths.
pub fn count_flops(config: &ModelConfig, src_len: usize, tgt_len: usize) -> Result<FlopReport> {
    config.validate()?;
    let mut report = FlopReport { total: 0, components: Vec::new() };
    let v = config.vocab_size;
    let (ts, tt) = (src_len, tgt_len);

    match &config.encoder {
        EncoderConfig::Rnmt(c) => report.push("encoder", rnmt_encoder_flops(c, ts)),
        EncoderConfig::Transformer(c) => report.push("encoder", transformer_encoder_flops(c, ts)),
        EncoderConfig::Conv(c) => report.push("encoder", conv_encoder_flops(c, ts)),
        EncoderConfig::Cascaded(c) => {
            report.push("encoder.rnmt", rnmt_encoder_flops(&c.rnmt, ts));
            let dim = c.rnmt.output_dim();
            report.push(
                "encoder.stack",
                c.transformer_layers as u64 * transformer_encoder_layer_flops(dim, c.ff_dim, ts),
            );
        }
        EncoderConfig::MultiColumn(c) => {
            report.push("encoder.col_rnmt", rnmt_encoder_flops(&c.rnmt, ts));
            report.push("encoder.col_transformer", transformer_encoder_flops(&c.transformer, ts));
            let d1 = c.rnmt.output_dim();
            let d2 = c.transformer.d_model;
            let out = config.encoder_output_dim();
            report.push("encoder.merge", matmul_flops(ts, d1 + d2, out));
        }
    }

    let enc_dim = config.encoder_output_dim();
    match &config.decoder {
        DecoderConfig::Rnmt(c) => {
            report.push("decoder", rnmt_decoder_flops(c, enc_dim, ts, tt));
            let softmax_in = if c.feed_context_to_softmax { c.units + enc_dim } else { c.units };
            report.push("softmax", matmul_flops(tt, softmax_in, v));
        }
        DecoderConfig::Transformer(c) => {
            report.push("decoder", transformer_decoder_flops(c, enc_dim, ts, tt));
            report.push("softmax", matmul_flops(tt, c.d_model, v));
        }
        DecoderConfig::Conv(c) => {
            report.push("decoder", conv_decoder_flops(c, enc_dim, ts, tt));
            report.push("softmax", matmul_flops(tt, c.embed_dim, v));
        }
    }
    Ok(report)
}

fn lstm_cell_flops(in_dim: usize, units: usize, steps: usize) -> u64 {
    matmul_flops(steps, in_dim, 4 * units) + matmul_flops(steps, units, 4 * units)
}

fn rnmt_encoder_flops(c: &RnmtEncoderConfig, ts: usize) -> u64 {
    let mut total = 2 * lstm_cell_flops(c.embed_dim, c.units, ts);
    for _ in 1..c.layers {
        total += 2 * lstm_cell_flops(2 * c.units, c.units, ts);
    }
    total + matmul_flops(ts, 2 * c.units, c.output_dim())
}

fn rnmt_decoder_flops(c: &RnmtDecoderConfig, ctx_dim: usize, ts: usize, tt: usize) -> u64 {
    let mut total = lstm_cell_flops(c.embed_dim, c.units, tt);
    for _ in 1..c.layers {
        total += lstm_cell_flops(c.units + ctx_dim, c.units, tt);
    }
    // additive attention: keys projected once; per step one query projection,
    // score and context products over all heads, one output projection
    let keys = matmul_flops(ts, ctx_dim, ctx_dim);
    let per_step = matmul_flops(1, c.units, ctx_dim)
        + 2 * matmul_flops(ts, ctx_dim, 1)
        + matmul_flops(1, ctx_dim, ctx_dim);
    total + keys + tt as u64 * per_step
}

fn transformer_encoder_layer_flops(d: usize, ff: usize, t: usize) -> u64 {
    4 * matmul_flops(t, d, d) + 2 * matmul_flops(t, t, d) + 2 * matmul_flops(t, d, ff)
}

fn transformer_encoder_flops(c: &TransformerStackConfig, ts: usize) -> u64 {
    c.layers as u64 * transformer_encoder_layer_flops(c.d_model, c.ff_dim, ts)
}

fn transformer_decoder_flops(
    c: &TransformerStackConfig,
    kv_dim: usize,
    ts: usize,
    tt: usize,
) -> u64 {
    let d = c.d_model;
    let self_attn = 4 * matmul_flops(tt, d, d) + 2 * matmul_flops(tt, tt, d);
    let cross = 2 * matmul_flops(tt, d, d)
        + 2 * matmul_flops(ts, kv_dim, d)
        + 2 * matmul_flops(tt, ts, d);
    let ff = 2 * matmul_flops(tt, d, c.ff_dim);
    c.layers as u64 * (self_attn + cross + ff)
}

fn conv_stack_flops(c: &ConvStackConfig, t: usize) -> u64 {
    let mut total = matmul_flops(t, c.embed_dim, c.layers[0].units);
    let mut d_in = c.layers[0].units;
    for spec in &c.layers {
        total += 2 * (t as u64) * (spec.width as u64) * (d_in as u64) * (2 * spec.units as u64);
        if d_in != spec.units {
            total += matmul_flops(t, d_in, spec.units);
        }
        d_in = spec.units;
    }
    total + matmul_flops(t, d_in, c.embed_dim)
}

fn conv_encoder_flops(c: &ConvStackConfig, ts: usize) -> u64 {
    conv_stack_flops(c, ts)
}

fn conv_decoder_flops(c: &ConvStackConfig, enc_dim: usize, ts: usize, tt: usize) -> u64 {
    let mut total = conv_stack_flops(c, tt);
    for spec in &c.layers {
        total += matmul_flops(tt, spec.units, enc_dim) // query projection
            + 2 * matmul_flops(tt, ts, enc_dim) // scores + context
            + matmul_flops(tt, enc_dim, spec.units); // context back-projection
    }
    total
}
