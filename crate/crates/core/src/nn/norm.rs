//! Layer normalization with learnable gain and bias, plus the identity
//! variant used when normalization is ablated.

use crate::error::Result;
use crate::param::{Fwd, Init, ParamBuilder, ParamId};
use crate::tensor::Var;

/// Layer norm over the trailing axis. `Identity` carries no parameters and
/// passes inputs through unchanged (the "- Layer Norm." ablation).
#[derive(Debug)]
pub enum LayerNorm {
    Learned { gain: ParamId, bias: ParamId, eps: f64 },
    Identity,
}

pub const LN_EPS: f64 = 1e-6;

impl LayerNorm {
    pub fn build(b: &mut ParamBuilder, name: &str, dim: usize, enabled: bool) -> LayerNorm {
        if !enabled {
            return LayerNorm::Identity;
        }
        b.scoped(name, |b| LayerNorm::Learned {
            gain: b.param("gain", &[dim], Init::Const(1.0)),
            bias: b.param("bias", &[dim], Init::Const(0.0)),
            eps: LN_EPS,
        })
    }

    pub fn forward(&self, fwd: &mut Fwd, x: Var) -> Result<Var> {
        match *self {
            LayerNorm::Learned { gain, bias, eps } => {
                let g = fwd.p(gain);
                let b = fwd.p(bias);
                fwd.tape.layer_norm(x, g, b, eps)
            }
            LayerNorm::Identity => Ok(x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{ParamStore, StoreMode};
    use crate::tensor::{Tape, Tensor};

    fn run(x: &[f64], gain: f64, bias: f64, eps: f64) -> Vec<f64> {
        let mut store = ParamStore::new(StoreMode::Alloc);
        let mut b = ParamBuilder::new(&mut store, 0);
        let ln = LayerNorm::Learned {
            gain: b.param("gain", &[x.len()], Init::Const(gain)),
            bias: b.param("bias", &[x.len()], Init::Const(bias)),
            eps,
        };
        let mut tape = Tape::new();
        let mut fwd = Fwd::new(&mut tape, &store, false, 0);
        let xv = fwd.tape.leaf(Tensor::new(vec![1, x.len()], x.to_vec()).unwrap(), false);
        let y = ln.forward(&mut fwd, xv).unwrap();
        fwd.tape.value(y).data.clone()
    }

    #[test]
    fn hand_example() {
        let y = run(&[1.0, 2.0, 3.0], 1.0, 0.0, 1e-12);
        let want = [-1.224745, 0.0, 1.224745];
        for (g, w) in y.iter().zip(want) {
            assert!((g - w).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_input_maps_to_bias() {
        let y = run(&[5.0, 5.0, 5.0], 1.0, 0.0, 1e-6);
        assert_eq!(y, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_gain_passes_bias() {
        let y = run(&[1.0, 2.0, 3.0], 0.0, 7.0, 1e-6);
        assert_eq!(y, vec![7.0, 7.0, 7.0]);
    }

    #[test]
    fn normalizes_mean_and_variance() {
        let y = run(&[0.3, -1.7, 2.9, 0.4], 1.0, 0.0, 1e-13);
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn identity_passes_through() {
        let store = ParamStore::new(StoreMode::Alloc);
        let mut tape = Tape::new();
        let mut fwd = Fwd::new(&mut tape, &store, false, 0);
        let x = fwd.tape.leaf(Tensor::vector(&[1.0, 9.0]), false);
        let y = LayerNorm::Identity.forward(&mut fwd, x).unwrap();
        assert_eq!(x, y);
    }
}
