//! Neural building blocks: layer norm, per-gate LN LSTM cells, multi-head
//! attention (additive and scaled dot-product), pre-norm transformer
//! sublayers, feed-forward blocks, gated convolutions with weight
//! normalization, and positional encodings.

mod attention;
mod conv;
mod lstm;
mod norm;
mod positional;
mod transformer;

pub use attention::{AdditiveAttention, DotAttention};
pub use conv::ConvGlu;
pub use lstm::{bidirectional_lstm_layer, LstmCell, LstmStep};
pub use norm::LayerNorm;
pub use positional::{sinusoidal_positions, LearnedPositions};
pub use transformer::{sublayer, FeedForward, TransformerDecoderLayer, TransformerEncoderLayer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Dropout probabilities at the four sites used across model families:
/// input embeddings, sublayer/LSTM-output residual paths, the feed-forward
/// inner activation, and attention weights.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DropoutSpec {
    pub input_p: f64,
    pub residual_p: f64,
    pub relu_p: f64,
    pub attention_p: f64,
}

impl Default for DropoutSpec {
    fn default() -> Self {
        DropoutSpec { input_p: 0.0, residual_p: 0.0, relu_p: 0.0, attention_p: 0.0 }
    }
}

impl DropoutSpec {
    pub fn all(p: f64) -> DropoutSpec {
        DropoutSpec { input_p: p, residual_p: p, relu_p: p, attention_p: p }
    }

    pub fn validate(&self) -> Result<()> {
        for p in [self.input_p, self.residual_p, self.relu_p, self.attention_p] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::InvalidProbability(p));
            }
        }
        Ok(())
    }
}

/// Weight-norm reparameterization `w = g · v / ‖v‖₂` with a scalar scale, so
/// the Frobenius norm of the effective weight equals `|g|`.
pub fn weight_norm(tape: &mut Tape, v: Var, g: Var) -> Result<Var> {
    if tape.value(v).norm() == 0.0 {
        return Err(Error::ZeroDirection);
    }
    let vv = tape.mul(v, v)?;
    let sum = tape.sum_all(vv)?;
    let norm = tape.sqrt(sum)?;
    let scale = tape.div(g, norm)?;
    tape.mul_scalar(v, scale)
}

/// Additive mask value used in place of −∞ before softmax; numerically
/// equivalent at f64 without producing NaN from ∞−∞.
pub const MASK_NEG: f64 = -1e9;
