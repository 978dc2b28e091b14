//! Encoder mixing schemes: a transformer stack cascaded on top of a frozen
//! pre-trained recurrent encoder, and a multi-column encoder that merges a
//! recurrent column with a transformer column per position.

use std::collections::BTreeMap;

use crate::arch::config::{CascadedConfig, MultiColumnConfig};
use crate::arch::rnmt::RnmtEncoder;
use crate::arch::transformer::TransformerEncoder;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nn::{DropoutSpec, LayerNorm};
use crate::param::{Fwd, Init, ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

pub const WEIGHT_INIT: f64 = 0.04;

/// Named tensors from a pre-trained model, keyed by canonical parameter name.
pub type TensorBundle = BTreeMap<String, Tensor>;

/// Pre-trained sources handed to the hybrid builders.
#[derive(Debug, Default)]
pub struct Pretrained {
    /// Recurrent encoder checkpoint (cascaded; first column of multi-column).
    pub encoder: Option<TensorBundle>,
    /// Transformer-encoder checkpoint (second column of multi-column),
    /// typically exported from a transformer-encoder/recurrent-decoder hybrid.
    pub transformer_column: Option<TensorBundle>,
}

/// Copy every parameter under `local_prefix` from the bundle, translating
/// names by swapping the prefix for `bundle_prefix`. All targets must be
/// covered; shape disagreements are checkpoint errors.
pub fn load_subtree(
    store: &mut ParamStore,
    local_prefix: &str,
    bundle: &TensorBundle,
    bundle_prefix: &str,
) -> Result<usize> {
    let names: Vec<String> = store
        .iter()
        .filter(|(_, e)| e.name.starts_with(local_prefix))
        .map(|(_, e)| e.name.clone())
        .collect();
    if names.is_empty() {
        return Err(Error::CheckpointIncompatible(format!(
            "no local parameters under '{local_prefix}'"
        )));
    }
    for name in &names {
        let key = format!("{bundle_prefix}{}", &name[local_prefix.len()..]);
        let tensor = bundle.get(&key).ok_or_else(|| {
            Error::CheckpointIncompatible(format!("checkpoint lacks '{key}' for '{name}'"))
        })?;
        store.assign_by_name(name, tensor.clone())?;
    }
    Ok(names.len())
}

/// Frozen pre-trained recurrent encoder (layers + projection + embedding),
/// its outputs layer-normalized and fed through transformer layers that use
/// no positional encodings.
#[derive(Debug)]
pub struct CascadedEncoder {
    pub rnmt: RnmtEncoder,
    bridge_ln: LayerNorm,
    pub stack: TransformerEncoder,
    pub frozen: bool,
}

impl CascadedEncoder {
    pub fn build(b: &mut ParamBuilder, cfg: &CascadedConfig, vocab: usize, layer_norm: bool) -> Result<CascadedEncoder> {
        let rnmt = b.scoped("rnmt", |b| RnmtEncoder::build(b, &cfg.rnmt, vocab, layer_norm));
        let dim = cfg.rnmt.output_dim();
        let bridge_ln = LayerNorm::build(b, "bridge_ln", dim, layer_norm);
        let stack = b.scoped("stack", |b| {
            TransformerEncoder::build_stack_only(
                b,
                cfg.transformer_layers,
                dim,
                cfg.ff_dim,
                cfg.heads,
                layer_norm,
            )
        })?;
        Ok(CascadedEncoder { rnmt, bridge_ln, stack, frozen: cfg.freeze })
    }

    /// Load the pre-trained recurrent column: local scope `encoder.rnmt.`
    /// from checkpoint scope `encoder.`.
    pub fn load_pretrained(store: &mut ParamStore, pretrained: &Pretrained) -> Result<()> {
        let bundle = pretrained
            .encoder
            .as_ref()
            .ok_or_else(|| Error::MissingPretrainedEncoder("cascaded encoder needs a recurrent checkpoint".into()))?;
        load_subtree(store, "encoder.rnmt.", bundle, "encoder.")?;
        Ok(())
    }

    pub fn encode(&self, fwd: &mut Fwd, batch: &Batch, drop: &DropoutSpec) -> Result<Vec<Var>> {
        let base = self.rnmt.encode(fwd, batch, drop)?;
        let mut out = Vec::with_capacity(base.len());
        for sentence in base {
            let normed = self.bridge_ln.forward(fwd, sentence)?;
            out.push(self.stack.forward_features(fwd, normed, drop)?);
        }
        Ok(out)
    }
}

/// Per-position merge of two encoder columns:
/// `out = LN(affine(concat(LN(rnmt_t), transformer_t)))`, projected to the
/// decoder dimension.
#[derive(Debug)]
pub struct MultiColumnEncoder {
    pub rnmt: RnmtEncoder,
    pub transformer: TransformerEncoder,
    col_ln: LayerNorm,
    merge_w: ParamId,
    merge_b: ParamId,
    out_ln: LayerNorm,
    pub out_dim: usize,
    pub frozen_columns: bool,
}

impl MultiColumnEncoder {
    pub fn build(
        b: &mut ParamBuilder,
        cfg: &MultiColumnConfig,
        vocab: usize,
        out_dim: usize,
        layer_norm: bool,
    ) -> Result<MultiColumnEncoder> {
        let rnmt = b.scoped("col_rnmt", |b| RnmtEncoder::build(b, &cfg.rnmt, vocab, layer_norm));
        let transformer =
            b.scoped("col_transformer", |b| TransformerEncoder::build(b, &cfg.transformer, vocab, layer_norm))?;
        let d1 = cfg.rnmt.output_dim();
        let d2 = cfg.transformer.d_model;
        let col_ln = LayerNorm::build(b, "merge_ln", d1, layer_norm);
        let (merge_w, merge_b) = b.scoped("merge", |b| {
            (
                b.param("w", &[d1 + d2, out_dim], Init::Uniform(WEIGHT_INIT)),
                b.param("b", &[out_dim], Init::Const(0.0)),
            )
        });
        let out_ln = LayerNorm::build(b, "out_ln", out_dim, layer_norm);
        Ok(MultiColumnEncoder {
            rnmt,
            transformer,
            col_ln,
            merge_w,
            merge_b,
            out_ln,
            out_dim,
            frozen_columns: cfg.freeze_columns,
        })
    }

    pub fn load_pretrained(store: &mut ParamStore, pretrained: &Pretrained) -> Result<()> {
        let rnmt_bundle = pretrained.encoder.as_ref().ok_or_else(|| {
            Error::MissingPretrainedEncoder("multi-column encoder needs a recurrent-column checkpoint".into())
        })?;
        let trans_bundle = pretrained.transformer_column.as_ref().ok_or_else(|| {
            Error::MissingPretrainedEncoder("multi-column encoder needs a transformer-column checkpoint".into())
        })?;
        load_subtree(store, "encoder.col_rnmt.", rnmt_bundle, "encoder.")?;
        load_subtree(store, "encoder.col_transformer.", trans_bundle, "encoder.")?;
        Ok(())
    }

    /// The affine merge before the final normalization, exposed for
    /// linearity diagnostics.
    pub fn merge_pre_ln(&self, fwd: &mut Fwd, rnmt_normed: Var, trans: Var) -> Result<Var> {
        let joined = fwd.tape.concat(&[rnmt_normed, trans], 1)?;
        let w = fwd.p(self.merge_w);
        let bias = fwd.p(self.merge_b);
        let merged = fwd.tape.matmul(joined, w)?;
        fwd.tape.add_bias(merged, bias)
    }

    /// Returns the merged per-sentence features plus each column's own
    /// outputs `(merged, [rnmt_column, transformer_column])`.
    pub fn encode(
        &self,
        fwd: &mut Fwd,
        batch: &Batch,
        drop: &DropoutSpec,
    ) -> Result<(Vec<Var>, Vec<Vec<Var>>)> {
        let col_a = self.rnmt.encode(fwd, batch, drop)?;
        let mut col_b = Vec::with_capacity(batch.size());
        for (row, &len) in batch.src.iter().zip(&batch.src_lens) {
            col_b.push(self.transformer.encode_sentence(fwd, &row[..len], drop)?);
        }
        let mut merged = Vec::with_capacity(batch.size());
        for (a, b_var) in col_a.iter().zip(&col_b) {
            let a_normed = self.col_ln.forward(fwd, *a)?;
            let pre = self.merge_pre_ln(fwd, a_normed, *b_var)?;
            merged.push(self.out_ln.forward(fwd, pre)?);
        }
        Ok((merged, vec![col_a, col_b]))
    }
}
