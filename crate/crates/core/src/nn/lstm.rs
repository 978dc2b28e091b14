//! LSTM cell with per-gate layer normalization, and the bidirectional
//! layer that concatenates forward and backward passes.
//!
//! Gate order in the fused weight matrices is (i, f, g, o). Each gate's
//! combined pre-activation `W x + U h` is layer-normalized with its own
//! gain/bias before the gate bias and nonlinearity; the cell state is
//! additionally normalized before the output tanh:
//!
//!   a_k = LN_k(W_k x + U_k h) + b_k
//!   c' = σ(a_f) ⊙ c + σ(a_i) ⊙ tanh(a_g)
//!   h' = σ(a_o) ⊙ tanh(LN_c(c'))
//!
//! `raw_output` switches the last line to h' = σ(a_o) ⊙ LN_c(c') for the
//! alternate reading of an un-squashed cell output; default off.

use crate::error::{Error, Result};
use crate::nn::LayerNorm;
use crate::param::{Fwd, Init, ParamBuilder, ParamId};
use crate::tensor::{Tensor, Var};

#[derive(Debug)]
pub struct LstmCell {
    pub input_dim: usize,
    pub hidden: usize,
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
    ln_gates: [LayerNorm; 4],
    ln_cell: LayerNorm,
    raw_output: bool,
}

/// One cell step plus the post-LN gate pre-activations (before gate bias),
/// exposed for normalization diagnostics.
pub struct LstmStep {
    pub h: Var,
    pub c: Var,
    pub gate_ln: [Var; 4],
}

pub const WEIGHT_INIT: f64 = 0.04;

impl LstmCell {
    pub fn build(
        b: &mut ParamBuilder,
        name: &str,
        input_dim: usize,
        hidden: usize,
        layer_norm: bool,
        raw_output: bool,
    ) -> LstmCell {
        b.scoped(name, |b| LstmCell {
            input_dim,
            hidden,
            w_ih: b.param("w_ih", &[input_dim, 4 * hidden], Init::Uniform(WEIGHT_INIT)),
            w_hh: b.param("w_hh", &[hidden, 4 * hidden], Init::Uniform(WEIGHT_INIT)),
            bias: b.param("bias", &[4 * hidden], Init::ForgetBias),
            ln_gates: [
                LayerNorm::build(b, "ln_i", hidden, layer_norm),
                LayerNorm::build(b, "ln_f", hidden, layer_norm),
                LayerNorm::build(b, "ln_g", hidden, layer_norm),
                LayerNorm::build(b, "ln_o", hidden, layer_norm),
            ],
            ln_cell: LayerNorm::build(b, "ln_c", hidden, layer_norm),
            raw_output,
        })
    }

    /// Batched step: `x [B, input_dim]`, state `[B, hidden]`.
    pub fn step(&self, fwd: &mut Fwd, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let s = self.step_traced(fwd, x, h, c)?;
        Ok((s.h, s.c))
    }

    pub fn step_traced(&self, fwd: &mut Fwd, x: Var, h: Var, c: Var) -> Result<LstmStep> {
        let hd = self.hidden;
        if fwd.tape.shape(x).last() != Some(&self.input_dim) {
            return Err(Error::shape(
                "lstm_step",
                format!("input {:?} for cell of input_dim {}", fwd.tape.shape(x), self.input_dim),
            ));
        }
        let w_ih = fwd.p(self.w_ih);
        let w_hh = fwd.p(self.w_hh);
        let bias = fwd.p(self.bias);
        let from_x = fwd.tape.matmul(x, w_ih)?;
        let from_h = fwd.tape.matmul(h, w_hh)?;
        let pre = fwd.tape.add(from_x, from_h)?; // [B, 4h]

        let mut gate_ln = [pre; 4];
        let mut acts = [pre; 4];
        for k in 0..4 {
            let slice = fwd.tape.narrow(pre, 1, k * hd, hd)?;
            let normed = self.ln_gates[k].forward(fwd, slice)?;
            gate_ln[k] = normed;
            let b_k = fwd.tape.narrow(bias, 0, k * hd, hd)?;
            acts[k] = fwd.tape.add_bias(normed, b_k)?;
        }
        let i = fwd.tape.sigmoid(acts[0])?;
        let f = fwd.tape.sigmoid(acts[1])?;
        let g = fwd.tape.tanh(acts[2])?;
        let o = fwd.tape.sigmoid(acts[3])?;

        let keep = fwd.tape.mul(f, c)?;
        let write = fwd.tape.mul(i, g)?;
        let c_next = fwd.tape.add(keep, write)?;
        let c_normed = self.ln_cell.forward(fwd, c_next)?;
        let h_next = if self.raw_output {
            fwd.tape.mul(o, c_normed)?
        } else {
            let squashed = fwd.tape.tanh(c_normed)?;
            fwd.tape.mul(o, squashed)?
        };
        Ok(LstmStep { h: h_next, c: c_next, gate_ln })
    }

    pub fn zero_state(&self, fwd: &mut Fwd, batch: usize) -> (Var, Var) {
        let h = fwd.tape.constant(Tensor::zeros(&[batch, self.hidden]));
        let c = fwd.tape.constant(Tensor::zeros(&[batch, self.hidden]));
        (h, c)
    }

    #[cfg(test)]
    pub(crate) fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w_ih, self.w_hh, self.bias];
        for ln in self.ln_gates.iter().chain(std::iter::once(&self.ln_cell)) {
            if let LayerNorm::Learned { gain, bias, .. } = ln {
                ids.push(*gain);
                ids.push(*bias);
            }
        }
        ids
    }

    #[cfg(test)]
    pub(crate) fn ln_gate_ids(&self) -> Vec<(ParamId, ParamId)> {
        self.ln_gates
            .iter()
            .chain(std::iter::once(&self.ln_cell))
            .filter_map(|ln| match ln {
                LayerNorm::Learned { gain, bias, .. } => Some((*gain, *bias)),
                LayerNorm::Identity => None,
            })
            .collect()
    }
}

/// Unbatched bidirectional layer over `seq [T, d_in]`: position `t` holds the
/// forward state after tokens `1..=t` concatenated with the backward state
/// after tokens `T..=t`; output is `[T, 2·hidden]`.
pub fn bidirectional_lstm_layer(
    fwd: &mut Fwd,
    fwd_cell: &LstmCell,
    bwd_cell: &LstmCell,
    seq: Var,
) -> Result<Var> {
    let shape = fwd.tape.shape(seq).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::EmptySequence);
    }
    let t_len = shape[0];

    let mut forward_states = Vec::with_capacity(t_len);
    let (mut h, mut c) = fwd_cell.zero_state(fwd, 1);
    for t in 0..t_len {
        let x = fwd.tape.narrow(seq, 0, t, 1)?;
        let (nh, nc) = fwd_cell.step(fwd, x, h, c)?;
        h = nh;
        c = nc;
        forward_states.push(h);
    }

    let mut backward_states = vec![h; t_len];
    let (mut h, mut c) = bwd_cell.zero_state(fwd, 1);
    for t in (0..t_len).rev() {
        let x = fwd.tape.narrow(seq, 0, t, 1)?;
        let (nh, nc) = bwd_cell.step(fwd, x, h, c)?;
        h = nh;
        c = nc;
        backward_states[t] = h;
    }

    let rows: Vec<Var> = (0..t_len)
        .map(|t| fwd.tape.concat(&[forward_states[t], backward_states[t]], 1))
        .collect::<Result<_>>()?;
    fwd.tape.concat(&rows, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{grad_check_store, ParamStore, StoreMode};
    use crate::tensor::Tape;

    fn cell_with_store(input_dim: usize, hidden: usize, seed: u64) -> (ParamStore, LstmCell) {
        let mut store = ParamStore::new(StoreMode::Alloc);
        let mut b = ParamBuilder::new(&mut store, seed);
        let cell = LstmCell::build(&mut b, "cell", input_dim, hidden, true, false);
        (store, cell)
    }

    fn zero_all(store: &mut ParamStore, cell: &LstmCell) {
        for id in cell.param_ids() {
            let shape = store.entry(id).shape.clone();
            store.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
    }

    #[test]
    fn all_zero_cell_is_inert() {
        let (mut store, cell) = cell_with_store(3, 2, 1);
        zero_all(&mut store, &cell);
        let mut tape = Tape::new();
        let mut fwd = Fwd::new(&mut tape, &store, false, 0);
        let x = fwd.tape.constant(Tensor::zeros(&[1, 3]));
        let (h0, c0) = cell.zero_state(&mut fwd, 1);
        let (h, c) = cell.step(&mut fwd, x, h0, c0).unwrap();
        assert_eq!(fwd.tape.value(h).data, vec![0.0, 0.0]);
        assert_eq!(fwd.tape.value(c).data, vec![0.0, 0.0]);
    }

    #[test]
    fn forced_scalar_cell_update() {
        // σ(i)=σ(f)=1 exactly via large biases behind zeroed LN, tanh(g)=0.5,
        // c_prev=1 → c = 1·1 + 1·0.5
        let (mut store, cell) = cell_with_store(1, 1, 1);
        zero_all(&mut store, &cell);
        // gate LN biases: i and f large, g = atanh(0.5), o arbitrary
        let ln = cell.ln_gate_ids();
        store.set_value(ln[0].1, Tensor::vector(&[40.0])).unwrap(); // i bias
        store.set_value(ln[1].1, Tensor::vector(&[40.0])).unwrap(); // f bias
        store.set_value(ln[2].1, Tensor::vector(&[0.5f64.atanh()])).unwrap(); // g bias

        let mut tape = Tape::new();
        let mut fwd = Fwd::new(&mut tape, &store, false, 0);
        let x = fwd.tape.constant(Tensor::zeros(&[1, 1]));
        let h0 = fwd.tape.constant(Tensor::zeros(&[1, 1]));
        let c0 = fwd.tape.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let (_h, c) = cell.step(&mut fwd, x, h0, c0).unwrap();
        assert!((fwd.tape.value(c).data[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn gate_preactivations_have_zero_mean_after_ln() {
        let (store, cell) = cell_with_store(5, 6, 9);
        let mut tape = Tape::new();
        let mut fwd = Fwd::new(&mut tape, &store, false, 0);
        let x = fwd.tape.constant(Tensor::full(&[2, 5], 0.3));
        let h0 = fwd.tape.constant(Tensor::full(&[2, 6], -0.2));
        let c0 = fwd.tape.constant(Tensor::zeros(&[2, 6]));
        let step = cell.step_traced(&mut fwd, x, h0, c0).unwrap();
        for gate in step.gate_ln {
            let v = fwd.tape.value(gate);
            for row in v.data.chunks(6) {
                let mean: f64 = row.iter().sum::<f64>() / 6.0;
                assert!(mean.abs() < 1e-12, "gate mean {mean}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (store, cell) = cell_with_store(3, 4, 42);
        let ids = cell.param_ids();
        let inputs = vec![
            Tensor::full(&[2, 3], 0.25),
            Tensor::full(&[2, 4], -0.1),
            Tensor::full(&[2, 4], 0.05),
        ];
        let err = grad_check_store(&store, &ids, &inputs, 1e-5, |fwd, vars| {
            let (h, c) = cell.step(fwd, vars[0], vars[1], vars[2])?;
            let both = fwd.tape.concat(&[h, c], 1)?;
            let t = fwd.tape.tanh(both)?;
            fwd.tape.sum_all(t)
        })
        .unwrap();
        assert!(err <= 1e-4, "error {err}");
    }

    #[test]
    fn bidirectional_shape_contract() {
        let mut store = ParamStore::new(StoreMode::Alloc);
        let mut b = ParamBuilder::new(&mut store, 3);
        let f = LstmCell::build(&mut b, "fwd", 4, 8, true, false);
        let bw = LstmCell::build(&mut b, "bwd", 4, 8, true, false);
        let mut tape = Tape::new();
        let mut fwd = Fwd::new(&mut tape, &store, false, 0);
        let seq = fwd.tape.constant(Tensor::full(&[5, 4], 0.1));
        let out = bidirectional_lstm_layer(&mut fwd, &f, &bw, seq).unwrap();
        assert_eq!(fwd.tape.shape(out), &[5, 16]);
    }

    #[test]
    fn length_one_matches_two_independent_cells() {
        let mut store = ParamStore::new(StoreMode::Alloc);
        let mut b = ParamBuilder::new(&mut store, 5);
        let f = LstmCell::build(&mut b, "fwd", 3, 2, true, false);
        let bw = LstmCell::build(&mut b, "bwd", 3, 2, true, false);
        let mut tape = Tape::new();
        let mut fwd = Fwd::new(&mut tape, &store, false, 0);
        let seq = fwd.tape.constant(Tensor::full(&[1, 3], 0.4));
        let out = bidirectional_lstm_layer(&mut fwd, &f, &bw, seq).unwrap();

        let x = fwd.tape.constant(Tensor::full(&[1, 3], 0.4));
        let (h0, c0) = f.zero_state(&mut fwd, 1);
        let (hf, _) = f.step(&mut fwd, x, h0, c0).unwrap();
        let (h0, c0) = bw.zero_state(&mut fwd, 1);
        let (hb, _) = bw.step(&mut fwd, x, h0, c0).unwrap();
        let expect = fwd.tape.concat(&[hf, hb], 1).unwrap();
        assert_eq!(fwd.tape.value(out).data, fwd.tape.value(expect).data);
    }

    #[test]
    fn palindrome_with_tied_directions_is_symmetric() {
        let mut store = ParamStore::new(StoreMode::Alloc);
        let mut b = ParamBuilder::new(&mut store, 8);
        let cell = LstmCell::build(&mut b, "cell", 2, 3, true, false);
        let mut tape = Tape::new();
        let mut fwd = Fwd::new(&mut tape, &store, false, 0);
        // palindromic sequence of length 3
        let seq = fwd
            .tape
            .constant(Tensor::matrix(&[vec![0.5, -0.3], vec![0.1, 0.9], vec![0.5, -0.3]]).unwrap());
        let out = bidirectional_lstm_layer(&mut fwd, &cell, &cell, seq).unwrap();
        let v = fwd.tape.value(out);
        let h = 3;
        for t in 0..3 {
            let mirror = 2 - t;
            for j in 0..h {
                // forward half at t equals backward half at T+1−t and vice versa
                let fwd_t = v.at2(t, j);
                let bwd_mirror = v.at2(mirror, h + j);
                assert!((fwd_t - bwd_mirror).abs() < 1e-12);
            }
        }
    }
}
