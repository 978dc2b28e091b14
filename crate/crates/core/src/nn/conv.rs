//! 1-D convolution + gated linear unit with weight-normalized kernels.
//!
//! The kernel produces `2·d_out` channels; the output is `A ⊙ σ(B)` where
//! `[A; B]` is the channel split. Encoder-side layers pad symmetrically for
//! same-length output; decoder-side layers pad left only, making position t
//! independent of inputs after t.

use crate::error::Result;
use crate::nn::weight_norm;
use crate::param::{Fwd, Init, ParamBuilder, ParamId};
use crate::tensor::{Tensor, Var};

pub const WEIGHT_INIT: f64 = 0.04;

#[derive(Debug)]
pub struct ConvGlu {
    pub width: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub causal: bool,
    kernel: ParamId,
    scale: ParamId,
    bias: ParamId,
}

impl ConvGlu {
    pub fn build(
        b: &mut ParamBuilder,
        name: &str,
        width: usize,
        in_dim: usize,
        out_dim: usize,
        causal: bool,
    ) -> ConvGlu {
        b.scoped(name, |b| {
            let kernel = b.param("kernel", &[width, in_dim, 2 * out_dim], Init::Uniform(WEIGHT_INIT));
            let scale = b.param("wn_scale", &[1], Init::Const(1.0));
            let bias = b.param("bias", &[2 * out_dim], Init::Const(0.0));
            let conv = ConvGlu { width, in_dim, out_dim, causal, kernel, scale, bias };
            // data-dependent weight-norm init: scale starts at ‖kernel‖ so the
            // effective weight initially equals the raw direction
            if let crate::param::StoreMode::Alloc = b.mode() {
                let norm = b.store().value(kernel).norm();
                b.store().set_value(scale, Tensor::scalar(norm)).expect("scale shape");
            }
            conv
        })
    }

    pub fn forward(&self, fwd: &mut Fwd, x: Var) -> Result<Var> {
        let (pad_left, pad_right) = if self.causal {
            (self.width - 1, 0)
        } else {
            let total = self.width - 1;
            (total / 2, total - total / 2)
        };
        self.forward_padded(fwd, x, pad_left, pad_right)
    }

    /// Convolve a short window (≤ width rows) into the single output row at
    /// its last position: the incremental-decode view of a causal layer.
    pub fn forward_last(&self, fwd: &mut Fwd, window: Var) -> Result<Var> {
        let rows = fwd.tape.shape(window)[0];
        let pad_left = self.width.saturating_sub(rows);
        self.forward_padded(fwd, window, pad_left, 0)
    }

    fn forward_padded(&self, fwd: &mut Fwd, x: Var, pad_left: usize, pad_right: usize) -> Result<Var> {
        let kernel = fwd.p(self.kernel);
        let scale = fwd.p(self.scale);
        let bias = fwd.p(self.bias);
        let effective = weight_norm(fwd.tape, kernel, scale)?;
        let conv = fwd.tape.conv1d(x, effective, pad_left, pad_right)?;
        let conv = fwd.tape.add_bias(conv, bias)?;
        let halves = fwd.tape.split(conv, 1, &[self.out_dim, self.out_dim])?;
        let gate = fwd.tape.sigmoid(halves[1])?;
        fwd.tape.mul(halves[0], gate)
    }

    #[cfg(test)]
    pub(crate) fn param_ids(&self) -> Vec<ParamId> {
        vec![self.kernel, self.scale, self.bias]
    }

    #[cfg(test)]
    pub(crate) fn kernel_ids(&self) -> (ParamId, ParamId) {
        (self.kernel, self.scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{grad_check_store, ParamStore, StoreMode};
    use crate::tensor::Tape;

    fn fixture(width: usize, d: usize, causal: bool, seed: u64) -> (ParamStore, ConvGlu) {
        let mut store = ParamStore::new(StoreMode::Alloc);
        let mut b = ParamBuilder::new(&mut store, seed);
        let conv = ConvGlu::build(&mut b, "conv", width, d, d, causal);
        (store, conv)
    }

    #[test]
    fn width_one_identity_kernel_halves_input() {
        // identity into the A half, zeros into the B half → out = 0.5 · x
        let (mut store, conv) = fixture(1, 2, false, 3);
        let mut kernel = Tensor::zeros(&[1, 2, 4]);
        kernel.data[0 * 4 + 0] = 1.0; // in 0 -> A channel 0
        kernel.data[1 * 4 + 1] = 1.0; // in 1 -> A channel 1
        let (kid, sid) = conv.kernel_ids();
        let norm = kernel.norm();
        store.set_value(kid, kernel).unwrap();
        store.set_value(sid, Tensor::scalar(norm)).unwrap();

        let mut tape = Tape::new();
        let mut fwd = Fwd::new(&mut tape, &store, false, 0);
        let x = fwd.tape.constant(Tensor::matrix(&[vec![2.0, -4.0], vec![6.0, 8.0]]).unwrap());
        let y = conv.forward(&mut fwd, x).unwrap();
        let got = &fwd.tape.value(y).data;
        let want = [1.0, -2.0, 3.0, 4.0];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn causal_output_ignores_future_inputs() {
        let (store, conv) = fixture(3, 2, true, 7);
        let run = |rows: &[Vec<f64>]| -> Vec<f64> {
            let mut tape = Tape::new();
            let mut fwd = Fwd::new(&mut tape, &store, false, 0);
            let x = fwd.tape.constant(Tensor::matrix(rows).unwrap());
            let y = conv.forward(&mut fwd, x).unwrap();
            fwd.tape.value(y).data.clone()
        };
        let base = run(&[vec![0.1, 0.2], vec![0.3, -0.4], vec![0.5, 0.6], vec![-0.7, 0.8]]);
        let perturbed = run(&[vec![0.1, 0.2], vec![0.3, -0.4], vec![9.0, -9.0], vec![5.0, 5.0]]);
        // positions 0 and 1 are bit-identical; later ones differ
        assert_eq!(&base[0..4], &perturbed[0..4]);
        assert_ne!(&base[4..], &perturbed[4..]);
    }

    #[test]
    fn same_padding_preserves_length() {
        let (store, conv) = fixture(3, 2, false, 11);
        let mut tape = Tape::new();
        let mut fwd = Fwd::new(&mut tape, &store, false, 0);
        let x = fwd.tape.constant(Tensor::full(&[5, 2], 0.3));
        let y = conv.forward(&mut fwd, x).unwrap();
        assert_eq!(fwd.tape.shape(y), &[5, 2]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (store, conv) = fixture(3, 2, true, 13);
        let err = grad_check_store(
            &store,
            &conv.param_ids(),
            &[Tensor::full(&[4, 2], 0.35)],
            1e-5,
            |fwd, vars| {
                let y = conv.forward(fwd, vars[0])?;
                let t = fwd.tape.tanh(y)?;
                fwd.tape.sum_all(t)
            },
        )
        .unwrap();
        assert!(err <= 1e-4, "error {err}");
    }
}
