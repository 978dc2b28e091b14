//! Named model configurations: the four full-scale reference shapes used
//! for parameter/FLOP accounting, and desk-scale shapes for toy training.
//!
//! Full-scale counting conventions (printed by the count tool): separate
//! source-embedding, target-embedding, and softmax matrices over a shared
//! 32,000-entry vocabulary; biases and layer-norm gains/biases included;
//! weight-norm scales included.

use crate::arch::config::*;
use crate::nn::DropoutSpec;

pub const FULL_VOCAB: usize = 32_000;

/// 6-layer / d=512 / ff=2048 / 8-head encoder-decoder.
pub fn transformer_base() -> ModelConfig {
    transformer_sized(512, 2048, 8)
}

/// 6-layer / d=1024 / ff=8192 / 16-head encoder-decoder.
pub fn transformer_big() -> ModelConfig {
    transformer_sized(1024, 8192, 16)
}

fn transformer_sized(d: usize, ff: usize, heads: usize) -> ModelConfig {
    let stack = TransformerStackConfig {
        layers: 6,
        d_model: d,
        ff_dim: ff,
        heads,
        positional: PositionalMode::Sinusoidal,
    };
    ModelConfig {
        family: Family::Transformer,
        vocab_size: FULL_VOCAB,
        label_smoothing: 0.1,
        dropout: DropoutSpec::all(0.1),
        layer_norm: true,
        loss_norm: None,
        encoder: EncoderConfig::Transformer(stack.clone()),
        decoder: DecoderConfig::Transformer(stack),
    }
}

/// 6 bidirectional encoder layers and 8 decoder layers of 1024 LSTM units,
/// encoder projection 2048 → 1024, 4-head additive attention.
pub fn rnmt_plus_full() -> ModelConfig {
    ModelConfig {
        family: Family::RnmtPlus,
        vocab_size: FULL_VOCAB,
        label_smoothing: 0.1,
        dropout: DropoutSpec::all(0.2),
        layer_norm: true,
        loss_norm: None,
        encoder: EncoderConfig::Rnmt(RnmtEncoderConfig {
            layers: 6,
            units: 1024,
            embed_dim: 1024,
            residual_start: 3,
            proj_dim: Some(1024),
        }),
        decoder: DecoderConfig::Rnmt(RnmtDecoderConfig {
            layers: 8,
            units: 1024,
            embed_dim: 1024,
            residual_start: 3,
            attention_heads: 4,
            feed_context_to_softmax: true,
            raw_output_gate: false,
        }),
    }
}

/// 14-layer convolutional stacks: 512×5, 768×4, 1024×3, 2048, 4096 units;
/// kernel width 3 for the first 12 layers and 1 for the final two.
pub fn convs2s_full() -> ModelConfig {
    let mut layers = Vec::new();
    for (count, units) in [(5, 512), (4, 768), (3, 1024)] {
        for _ in 0..count {
            layers.push(ConvLayerSpec { units, width: 3 });
        }
    }
    layers.push(ConvLayerSpec { units: 2048, width: 1 });
    layers.push(ConvLayerSpec { units: 4096, width: 1 });
    let stack = ConvStackConfig { embed_dim: 768, layers, max_positions: 1024, grad_scale: None };
    ModelConfig {
        family: Family::Convs2s,
        vocab_size: FULL_VOCAB,
        label_smoothing: 0.1,
        dropout: DropoutSpec::all(0.1),
        layer_norm: true,
        loss_norm: None,
        encoder: EncoderConfig::Conv(stack.clone()),
        decoder: DecoderConfig::Conv(stack),
    }
}

// ---- desk-scale shapes ------------------------------------------------

/// Small recurrent model for toy tasks.
pub fn toy_rnmt(vocab: usize) -> ModelConfig {
    ModelConfig {
        family: Family::RnmtPlus,
        vocab_size: vocab,
        label_smoothing: 0.1,
        dropout: DropoutSpec::default(),
        layer_norm: true,
        loss_norm: None,
        encoder: EncoderConfig::Rnmt(RnmtEncoderConfig {
            layers: 2,
            units: 32,
            embed_dim: 32,
            residual_start: 3,
            proj_dim: None,
        }),
        decoder: DecoderConfig::Rnmt(RnmtDecoderConfig {
            layers: 3,
            units: 32,
            embed_dim: 32,
            residual_start: 3,
            attention_heads: 4,
            feed_context_to_softmax: true,
            raw_output_gate: false,
        }),
    }
}

pub fn toy_transformer(vocab: usize) -> ModelConfig {
    let stack = TransformerStackConfig {
        layers: 2,
        d_model: 32,
        ff_dim: 64,
        heads: 4,
        positional: PositionalMode::Sinusoidal,
    };
    ModelConfig {
        family: Family::Transformer,
        vocab_size: vocab,
        label_smoothing: 0.1,
        dropout: DropoutSpec::default(),
        layer_norm: true,
        loss_norm: None,
        encoder: EncoderConfig::Transformer(stack.clone()),
        decoder: DecoderConfig::Transformer(stack),
    }
}

pub fn toy_convs2s(vocab: usize) -> ModelConfig {
    let stack = ConvStackConfig {
        embed_dim: 32,
        layers: vec![
            ConvLayerSpec { units: 32, width: 3 },
            ConvLayerSpec { units: 32, width: 3 },
            ConvLayerSpec { units: 32, width: 3 },
            ConvLayerSpec { units: 32, width: 3 },
        ],
        max_positions: 64,
        grad_scale: None,
    };
    ModelConfig {
        family: Family::Convs2s,
        vocab_size: vocab,
        label_smoothing: 0.1,
        dropout: DropoutSpec::default(),
        layer_norm: true,
        loss_norm: None,
        encoder: EncoderConfig::Conv(stack.clone()),
        decoder: DecoderConfig::Conv(stack),
    }
}

/// Transformer encoder driving a recurrent decoder.
pub fn toy_hybrid_trans_enc(vocab: usize) -> ModelConfig {
    ModelConfig {
        family: Family::Hybrid,
        vocab_size: vocab,
        label_smoothing: 0.1,
        dropout: DropoutSpec::default(),
        layer_norm: true,
        loss_norm: None,
        encoder: EncoderConfig::Transformer(TransformerStackConfig {
            layers: 2,
            d_model: 32,
            ff_dim: 64,
            heads: 4,
            positional: PositionalMode::Sinusoidal,
        }),
        decoder: DecoderConfig::Rnmt(RnmtDecoderConfig {
            layers: 3,
            units: 32,
            embed_dim: 32,
            residual_start: 3,
            attention_heads: 4,
            feed_context_to_softmax: true,
            raw_output_gate: false,
        }),
    }
}

/// Recurrent encoder driving a transformer decoder.
pub fn toy_hybrid_rnmt_enc(vocab: usize) -> ModelConfig {
    ModelConfig {
        family: Family::Hybrid,
        vocab_size: vocab,
        label_smoothing: 0.1,
        dropout: DropoutSpec::default(),
        layer_norm: true,
        loss_norm: None,
        encoder: EncoderConfig::Rnmt(RnmtEncoderConfig {
            layers: 2,
            units: 32,
            embed_dim: 32,
            residual_start: 3,
            proj_dim: None,
        }),
        decoder: DecoderConfig::Transformer(TransformerStackConfig {
            layers: 2,
            d_model: 32,
            ff_dim: 64,
            heads: 4,
            positional: PositionalMode::Sinusoidal,
        }),
    }
}

/// Two transformer layers stacked on the frozen toy recurrent encoder.
pub fn toy_cascaded(vocab: usize) -> ModelConfig {
    ModelConfig {
        family: Family::Cascaded,
        vocab_size: vocab,
        label_smoothing: 0.1,
        dropout: DropoutSpec::default(),
        layer_norm: true,
        loss_norm: None,
        encoder: EncoderConfig::Cascaded(CascadedConfig {
            rnmt: RnmtEncoderConfig {
                layers: 2,
                units: 32,
                embed_dim: 32,
                residual_start: 3,
                proj_dim: None,
            },
            transformer_layers: 2,
            heads: 4,
            ff_dim: 64,
            freeze: true,
        }),
        decoder: DecoderConfig::Rnmt(RnmtDecoderConfig {
            layers: 3,
            units: 32,
            embed_dim: 32,
            residual_start: 3,
            attention_heads: 4,
            feed_context_to_softmax: true,
            raw_output_gate: false,
        }),
    }
}

/// Frozen toy recurrent column merged with the frozen transformer column of
/// the transformer-encoder hybrid.
pub fn toy_multi_column(vocab: usize) -> ModelConfig {
    ModelConfig {
        family: Family::MultiColumn,
        vocab_size: vocab,
        label_smoothing: 0.1,
        dropout: DropoutSpec::default(),
        layer_norm: true,
        loss_norm: None,
        encoder: EncoderConfig::MultiColumn(MultiColumnConfig {
            rnmt: RnmtEncoderConfig {
                layers: 2,
                units: 32,
                embed_dim: 32,
                residual_start: 3,
                proj_dim: None,
            },
            transformer: TransformerStackConfig {
                layers: 2,
                d_model: 32,
                ff_dim: 64,
                heads: 4,
                positional: PositionalMode::Sinusoidal,
            },
            freeze_columns: true,
        }),
        decoder: DecoderConfig::Rnmt(RnmtDecoderConfig {
            layers: 3,
            units: 32,
            embed_dim: 32,
            residual_start: 3,
            attention_heads: 4,
            feed_context_to_softmax: true,
            raw_output_gate: false,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_presets_validate() {
        for cfg in [
            transformer_base(),
            transformer_big(),
            rnmt_plus_full(),
            convs2s_full(),
            toy_rnmt(16),
            toy_transformer(16),
            toy_convs2s(16),
            toy_hybrid_trans_enc(16),
            toy_hybrid_rnmt_enc(16),
            toy_cascaded(16),
            toy_multi_column(16),
        ] {
            cfg.validate().unwrap();
        }
    }
}
