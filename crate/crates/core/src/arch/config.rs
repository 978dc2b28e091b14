//! Declarative model configuration: families, stack shapes, hybrid wiring.

use serde::{Deserialize, Serialize};

use crate::data::RESERVED;
use crate::error::{Error, Result};
use crate::nn::DropoutSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    RnmtPlus,
    Transformer,
    Convs2s,
    Hybrid,
    Cascaded,
    MultiColumn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    /// Mean over sentences of per-sentence token-loss sums.
    Sentence,
    /// Sum over tokens divided by token count.
    Token,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub vocab_size: usize,
    /// Label-smoothing uncertainty u.
    #[serde(default)]
    pub label_smoothing: f64,
    #[serde(default)]
    pub dropout: DropoutSpec,
    /// All layer normalization replaced by identity when false (ablation).
    #[serde(default = "default_true")]
    pub layer_norm: bool,
    /// Loss normalization; defaults by decoder family when absent.
    #[serde(default)]
    pub loss_norm: Option<LossNorm>,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EncoderConfig {
    Rnmt(RnmtEncoderConfig),
    Transformer(TransformerStackConfig),
    Conv(ConvStackConfig),
    Cascaded(CascadedConfig),
    MultiColumn(MultiColumnConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecoderConfig {
    Rnmt(RnmtDecoderConfig),
    Transformer(TransformerStackConfig),
    Conv(ConvStackConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RnmtEncoderConfig {
    /// Bidirectional layer count.
    pub layers: usize,
    pub units: usize,
    pub embed_dim: usize,
    /// First layer (1-indexed) with a residual connection.
    #[serde(default = "default_residual_start")]
    pub residual_start: usize,
    /// Final projection output; defaults to `units`.
    #[serde(default)]
    pub proj_dim: Option<usize>,
}

impl RnmtEncoderConfig {
    pub fn output_dim(&self) -> usize {
        self.proj_dim.unwrap_or(self.units)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RnmtDecoderConfig {
    pub layers: usize,
    pub units: usize,
    pub embed_dim: usize,
    #[serde(default = "default_residual_start")]
    pub residual_start: usize,
    #[serde(default = "default_heads")]
    pub attention_heads: usize,
    /// Concatenate the attention context into the softmax input.
    #[serde(default = "default_true")]
    pub feed_context_to_softmax: bool,
    /// Alternate cell-output reading: h = σ(o) ⊙ LN(c) without the tanh.
    #[serde(default)]
    pub raw_output_gate: bool,
}

fn default_residual_start() -> usize {
    3
}

fn default_heads() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerStackConfig {
    pub layers: usize,
    pub d_model: usize,
    pub ff_dim: usize,
    pub heads: usize,
    #[serde(default)]
    pub positional: PositionalMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PositionalMode {
    #[default]
    Sinusoidal,
    Learned {
        max_len: usize,
    },
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerSpec {
    pub units: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStackConfig {
    pub embed_dim: usize,
    pub layers: Vec<ConvLayerSpec>,
    #[serde(default = "default_max_positions")]
    pub max_positions: usize,
    /// Encoder-side gradient scale on the features each decoder attention
    /// consumes; `None` means 1/(2 · decoder layer count).
    #[serde(default)]
    pub grad_scale: Option<f64>,
}

fn default_max_positions() -> usize {
    1024
}

/// Transformer layers stacked on a pre-trained, frozen recurrent encoder.
/// The stacked layers use no positional encodings: position information is
/// already captured by the recurrent column underneath.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadedConfig {
    pub rnmt: RnmtEncoderConfig,
    #[serde(default = "default_cascade_layers")]
    pub transformer_layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    #[serde(default = "default_true")]
    pub freeze: bool,
}

fn default_cascade_layers() -> usize {
    4
}

/// Two pre-trained encoder columns merged per position by
/// LN(rnmt) → concat → affine → LN, projected to the decoder dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiColumnConfig {
    pub rnmt: RnmtEncoderConfig,
    pub transformer: TransformerStackConfig,
    #[serde(default = "default_true")]
    pub freeze_columns: bool,
}

impl ModelConfig {
    /// Feature dimension the decoder attends over.
    pub fn encoder_output_dim(&self) -> usize {
        match &self.encoder {
            EncoderConfig::Rnmt(c) => c.output_dim(),
            EncoderConfig::Transformer(c) => c.d_model,
            EncoderConfig::Conv(c) => c.embed_dim,
            EncoderConfig::Cascaded(c) => c.rnmt.output_dim(),
            EncoderConfig::MultiColumn(_) => match &self.decoder {
                DecoderConfig::Rnmt(d) => d.units,
                DecoderConfig::Transformer(d) => d.d_model,
                DecoderConfig::Conv(d) => d.embed_dim,
            },
        }
    }

    pub fn resolved_loss_norm(&self) -> LossNorm {
        self.loss_norm.unwrap_or(match &self.decoder {
            DecoderConfig::Rnmt(_) => LossNorm::Sentence,
            _ => LossNorm::Token,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::ConfigInvalid(msg));
        if self.vocab_size <= RESERVED {
            return fail(format!("vocab size {} leaves no content tokens", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label smoothing {} outside [0, 1)", self.label_smoothing));
        }
        self.dropout.validate()?;

        // family ↔ stack agreement
        let ok = match self.family {
            Family::RnmtPlus => {
                matches!(self.encoder, EncoderConfig::Rnmt(_))
                    && matches!(self.decoder, DecoderConfig::Rnmt(_))
            }
            Family::Transformer => {
                matches!(self.encoder, EncoderConfig::Transformer(_))
                    && matches!(self.decoder, DecoderConfig::Transformer(_))
            }
            Family::Convs2s => {
                matches!(self.encoder, EncoderConfig::Conv(_))
                    && matches!(self.decoder, DecoderConfig::Conv(_))
            }
            Family::Hybrid => matches!(
                (&self.encoder, &self.decoder),
                (EncoderConfig::Transformer(_), DecoderConfig::Rnmt(_))
                    | (EncoderConfig::Rnmt(_), DecoderConfig::Transformer(_))
            ),
            Family::Cascaded => {
                matches!(self.encoder, EncoderConfig::Cascaded(_))
                    && matches!(self.decoder, DecoderConfig::Rnmt(_))
            }
            Family::MultiColumn => {
                matches!(self.encoder, EncoderConfig::MultiColumn(_))
                    && matches!(self.decoder, DecoderConfig::Rnmt(_))
            }
        };
        if !ok {
            return fail(format!(
                "family {:?} does not admit this encoder/decoder combination \
                 (convolutional hybrids are rejected)",
                self.family
            ));
        }

        match &self.encoder {
            EncoderConfig::Rnmt(c) => validate_rnmt_encoder(c)?,
            EncoderConfig::Transformer(c) => validate_transformer_stack(c)?,
            EncoderConfig::Conv(c) => validate_conv_stack(c)?,
            EncoderConfig::Cascaded(c) => {
                validate_rnmt_encoder(&c.rnmt)?;
                if c.transformer_layers == 0 {
                    return fail("cascaded stack needs at least one layer".into());
                }
                if c.rnmt.output_dim() % c.heads != 0 {
                    return fail(format!(
                        "cascaded dim {} not divisible by {} heads",
                        c.rnmt.output_dim(),
                        c.heads
                    ));
                }
            }
            EncoderConfig::MultiColumn(c) => {
                validate_rnmt_encoder(&c.rnmt)?;
                validate_transformer_stack(&c.transformer)?;
            }
        }
        match &self.decoder {
            DecoderConfig::Rnmt(c) => {
                if c.layers < 2 {
                    return fail("recurrent decoder needs a bottom layer plus at least one more".into());
                }
                if c.residual_start < 1 {
                    return fail("residual_start must be ≥ 1".into());
                }
                let ctx = self.encoder_output_dim();
                if ctx % c.attention_heads != 0 {
                    return fail(format!(
                        "attention dim {ctx} not divisible by {} heads",
                        c.attention_heads
                    ));
                }
            }
            DecoderConfig::Transformer(c) => validate_transformer_stack(c)?,
            DecoderConfig::Conv(c) => validate_conv_stack(c)?,
        }
        Ok(())
    }

    /// Heads everywhere set to `h` (the "- Multi-head Attention" ablation
    /// uses h = 1).
    pub fn set_all_heads(&mut self, h: usize) {
        match &mut self.encoder {
            EncoderConfig::Transformer(c) => c.heads = h,
            EncoderConfig::Cascaded(c) => c.heads = h,
            EncoderConfig::MultiColumn(c) => c.transformer.heads = h,
            _ => {}
        }
        match &mut self.decoder {
            DecoderConfig::Rnmt(c) => c.attention_heads = h,
            DecoderConfig::Transformer(c) => c.heads = h,
            _ => {}
        }
    }
}

fn validate_rnmt_encoder(c: &RnmtEncoderConfig) -> Result<()> {
    if c.layers == 0 || c.units == 0 || c.embed_dim == 0 {
        return Err(Error::ConfigInvalid("recurrent encoder needs layers, units, embed_dim > 0".into()));
    }
    if c.residual_start < 1 {
        return Err(Error::ConfigInvalid("residual_start must be ≥ 1".into()));
    }
    if c.residual_start == 1 && c.embed_dim != 2 * c.units {
        return Err(Error::ConfigInvalid(
            "residual at layer 1 needs embed_dim == 2·units".into(),
        ));
    }
    Ok(())
}

fn validate_transformer_stack(c: &TransformerStackConfig) -> Result<()> {
    if c.layers == 0 || c.d_model == 0 || c.ff_dim == 0 {
        return Err(Error::ConfigInvalid("transformer stack needs layers, dims > 0".into()));
    }
    if c.heads == 0 || c.d_model % c.heads != 0 {
        return Err(Error::ConfigInvalid(format!(
            "d_model {} not divisible by {} heads",
            c.d_model, c.heads
        )));
    }
    Ok(())
}

fn validate_conv_stack(c: &ConvStackConfig) -> Result<()> {
    if c.layers.is_empty() || c.embed_dim == 0 {
        return Err(Error::ConfigInvalid("conv stack needs at least one layer".into()));
    }
    if c.layers.iter().any(|l| l.units == 0 || l.width == 0) {
        return Err(Error::ConfigInvalid("conv layers need units, width > 0".into()));
    }
    if let Some(g) = c.grad_scale {
        if !(g.is_finite() && g > 0.0) {
            return Err(Error::ConfigInvalid(format!("grad scale {g} must be positive")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_rnmt_config() -> ModelConfig {
        ModelConfig {
            family: Family::RnmtPlus,
            vocab_size: 16,
            label_smoothing: 0.1,
            dropout: DropoutSpec::default(),
            layer_norm: true,
            loss_norm: None,
            encoder: EncoderConfig::Rnmt(RnmtEncoderConfig {
                layers: 2,
                units: 8,
                embed_dim: 8,
                residual_start: 3,
                proj_dim: None,
            }),
            decoder: DecoderConfig::Rnmt(RnmtDecoderConfig {
                layers: 3,
                units: 8,
                embed_dim: 8,
                residual_start: 3,
                attention_heads: 2,
                feed_context_to_softmax: true,
                raw_output_gate: false,
            }),
        }
    }

    #[test]
    fn valid_config_passes() {
        tiny_rnmt_config().validate().unwrap();
    }

    #[test]
    fn conv_hybrids_rejected() {
        let mut cfg = tiny_rnmt_config();
        cfg.family = Family::Hybrid;
        cfg.encoder = EncoderConfig::Conv(ConvStackConfig {
            embed_dim: 8,
            layers: vec![ConvLayerSpec { units: 8, width: 3 }],
            max_positions: 64,
            grad_scale: None,
        });
        assert!(matches!(cfg.validate(), Err(Error::ConfigInvalid(_))));
    }

    #[test]
    fn head_divisibility_enforced() {
        let mut cfg = tiny_rnmt_config();
        if let DecoderConfig::Rnmt(d) = &mut cfg.decoder {
            d.attention_heads = 3; // 8 % 3 != 0
        }
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn loss_norm_defaults_by_decoder_family() {
        let cfg = tiny_rnmt_config();
        assert_eq!(cfg.resolved_loss_norm(), LossNorm::Sentence);
    }
}
