//! Multi-head attention, in two flavors: additive (tanh-scored) and scaled
//! dot-product. Heads partition the attention dimension; each head scores
//! independently and the concatenated head contexts pass through one output
//! projection.

use crate::error::{Error, Result};
use crate::nn::MASK_NEG;
use crate::param::{Fwd, Init, ParamBuilder, ParamId};
use crate::tensor::{Tensor, Var};

pub const WEIGHT_INIT: f64 = 0.04;

/// Additive attention: per head i over key positions t,
/// `score_t = vᵢᵀ tanh(Wq,ᵢ q + Wk,ᵢ k_t)`; masked positions receive a large
/// negative additive term before softmax; values are sliced per head and the
/// weighted sums are concatenated and projected.
#[derive(Debug)]
pub struct AdditiveAttention {
    pub heads: usize,
    /// Attention (key/value) dimension; must be divisible by `heads`.
    pub dim: usize,
    pub query_dim: usize,
    wq: ParamId,
    wk: ParamId,
    score_v: ParamId,
    wo: ParamId,
    bo: ParamId,
}

impl AdditiveAttention {
    pub fn build(
        b: &mut ParamBuilder,
        name: &str,
        query_dim: usize,
        dim: usize,
        heads: usize,
    ) -> Result<AdditiveAttention> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::ConfigInvalid(format!(
                "attention dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(b.scoped(name, |b| AdditiveAttention {
            heads,
            dim,
            query_dim,
            wq: b.param("wq", &[query_dim, dim], Init::Uniform(WEIGHT_INIT)),
            wk: b.param("wk", &[dim, dim], Init::Uniform(WEIGHT_INIT)),
            score_v: b.param("v", &[dim], Init::Uniform(WEIGHT_INIT)),
            wo: b.param("wo", &[dim, dim], Init::Uniform(WEIGHT_INIT)),
            bo: b.param("bo", &[dim], Init::Const(0.0)),
        }))
    }

    /// Key projection `keys[L, dim] · Wk`, computable once per source.
    pub fn project_keys(&self, fwd: &mut Fwd, keys: Var) -> Result<Var> {
        let wk = fwd.p(self.wk);
        fwd.tape.matmul(keys, wk)
    }

    /// One query against projected keys and raw values (both `[L, dim]`).
    /// Returns the context `[1, dim]` and per-head weight rows `[1, L]`.
    pub fn attend(
        &self,
        fwd: &mut Fwd,
        query: Var,
        keys_projected: Var,
        values: Var,
        mask: Option<&[bool]>,
        attention_p: f64,
    ) -> Result<(Var, Vec<Var>)> {
        let l = fwd.tape.shape(keys_projected)[0];
        let dh = self.dim / self.heads;
        let mask_leaf = build_mask_row(fwd, mask, l)?;

        let wq = fwd.p(self.wq);
        let qp = fwd.tape.matmul(query, wq)?; // [1, dim]
        let q_flat = fwd.tape.reshape(qp, vec![self.dim])?;
        let score_v = fwd.p(self.score_v);

        let mut contexts = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let q_h = fwd.tape.narrow(q_flat, 0, head * dh, dh)?;
            let k_h = fwd.tape.narrow(keys_projected, 1, head * dh, dh)?;
            let summed = fwd.tape.add_bias(k_h, q_h)?;
            let scored = fwd.tape.tanh(summed)?;
            let v_h = fwd.tape.narrow(score_v, 0, head * dh, dh)?;
            let v_col = fwd.tape.reshape(v_h, vec![dh, 1])?;
            let scores = fwd.tape.matmul(scored, v_col)?; // [L, 1]
            let mut row = fwd.tape.transpose(scores)?; // [1, L]
            if let Some(m) = mask_leaf {
                row = fwd.tape.add(row, m)?;
            }
            let w = fwd.tape.softmax(row)?;
            let w = fwd.dropout(w, attention_p)?;
            let values_h = fwd.tape.narrow(values, 1, head * dh, dh)?;
            contexts.push(fwd.tape.matmul(w, values_h)?);
            weights.push(w);
        }
        let ctx = fwd.tape.concat(&contexts, 1)?;
        let wo = fwd.p(self.wo);
        let bo = fwd.p(self.bo);
        let projected = fwd.tape.matmul(ctx, wo)?;
        let out = fwd.tape.add_bias(projected, bo)?;
        Ok((out, weights))
    }

    #[cfg(test)]
    pub(crate) fn param_ids(&self) -> Vec<ParamId> {
        vec![self.wq, self.wk, self.score_v, self.wo, self.bo]
    }
}

/// Scaled dot-product attention: per head, `softmax(Q Kᵀ / √d_k + mask) V`,
/// with an optional causal restriction for decoder self-attention.
#[derive(Debug)]
pub struct DotAttention {
    pub heads: usize,
    pub dim: usize,
    pub kv_dim: usize,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

impl DotAttention {
    pub fn build(
        b: &mut ParamBuilder,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
    ) -> Result<DotAttention> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::ConfigInvalid(format!(
                "attention dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(b.scoped(name, |b| DotAttention {
            heads,
            dim,
            kv_dim,
            wq: b.param("wq", &[dim, dim], Init::Uniform(WEIGHT_INIT)),
            bq: b.param("bq", &[dim], Init::Const(0.0)),
            wk: b.param("wk", &[kv_dim, dim], Init::Uniform(WEIGHT_INIT)),
            bk: b.param("bk", &[dim], Init::Const(0.0)),
            wv: b.param("wv", &[kv_dim, dim], Init::Uniform(WEIGHT_INIT)),
            bv: b.param("bv", &[dim], Init::Const(0.0)),
            wo: b.param("wo", &[dim, dim], Init::Uniform(WEIGHT_INIT)),
            bo: b.param("bo", &[dim], Init::Const(0.0)),
        }))
    }

    /// Project key/value inputs once (cachable across decode steps).
    pub fn project_kv(&self, fwd: &mut Fwd, kv: Var) -> Result<(Var, Var)> {
        let wk = fwd.p(self.wk);
        let bk = fwd.p(self.bk);
        let wv = fwd.p(self.wv);
        let bv = fwd.p(self.bv);
        let k = fwd.tape.matmul(kv, wk)?;
        let k = fwd.tape.add_bias(k, bk)?;
        let v = fwd.tape.matmul(kv, wv)?;
        let v = fwd.tape.add_bias(v, bv)?;
        Ok((k, v))
    }

    pub fn attend(
        &self,
        fwd: &mut Fwd,
        queries: Var,
        kv: Var,
        causal: bool,
        mask: Option<&[bool]>,
        attention_p: f64,
    ) -> Result<(Var, Vec<Var>)> {
        let (k, v) = self.project_kv(fwd, kv)?;
        self.attend_projected(fwd, queries, k, v, causal, mask, attention_p)
    }

    /// `queries [Tq, dim]` against projected keys/values `[Tk, dim]`. With
    /// `causal`, query row i (at absolute position `Tk - Tq + i`) only sees
    /// key positions up to its own, which covers both full-sequence and
    /// incremental (cached) decoding.
    pub fn attend_projected(
        &self,
        fwd: &mut Fwd,
        queries: Var,
        k: Var,
        v: Var,
        causal: bool,
        mask: Option<&[bool]>,
        attention_p: f64,
    ) -> Result<(Var, Vec<Var>)> {
        let tq = fwd.tape.shape(queries)[0];
        let tk = fwd.tape.shape(k)[0];
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mask_leaf = build_mask_matrix(fwd, mask, causal, tq, tk)?;

        let wq = fwd.p(self.wq);
        let bq = fwd.p(self.bq);
        let q = fwd.tape.matmul(queries, wq)?;
        let q = fwd.tape.add_bias(q, bq)?;

        let mut contexts = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let q_h = fwd.tape.narrow(q, 1, head * dh, dh)?;
            let k_h = fwd.tape.narrow(k, 1, head * dh, dh)?;
            let v_h = fwd.tape.narrow(v, 1, head * dh, dh)?;
            let k_t = fwd.tape.transpose(k_h)?;
            let raw = fwd.tape.matmul(q_h, k_t)?;
            let mut scores = fwd.tape.scale(raw, scale)?;
            if let Some(m) = mask_leaf {
                scores = fwd.tape.add(scores, m)?;
            }
            let w = fwd.tape.softmax(scores)?;
            let w = fwd.dropout(w, attention_p)?;
            contexts.push(fwd.tape.matmul(w, v_h)?);
            weights.push(w);
        }
        let ctx = fwd.tape.concat(&contexts, 1)?;
        let wo = fwd.p(self.wo);
        let bo = fwd.p(self.bo);
        let projected = fwd.tape.matmul(ctx, wo)?;
        let out = fwd.tape.add_bias(projected, bo)?;
        Ok((out, weights))
    }

    #[cfg(test)]
    pub(crate) fn param_ids(&self) -> Vec<ParamId> {
        vec![self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo]
    }
}

fn build_mask_row(fwd: &mut Fwd, mask: Option<&[bool]>, l: usize) -> Result<Option<Var>> {
    match mask {
        None => Ok(None),
        Some(m) => {
            if m.len() != l {
                return Err(Error::shape("attention_mask", format!("{} flags for {l} keys", m.len())));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::AllMasked);
            }
            let data = m.iter().map(|&keep| if keep { 0.0 } else { MASK_NEG }).collect();
            Ok(Some(fwd.tape.constant(Tensor { shape: vec![1, l], data })))
        }
    }
}

fn build_mask_matrix(
    fwd: &mut Fwd,
    mask: Option<&[bool]>,
    causal: bool,
    tq: usize,
    tk: usize,
) -> Result<Option<Var>> {
    if mask.is_none() && !causal {
        return Ok(None);
    }
    if let Some(m) = mask {
        if m.len() != tk {
            return Err(Error::shape("attention_mask", format!("{} flags for {tk} keys", m.len())));
        }
        if !m.iter().any(|&b| b) {
            return Err(Error::AllMasked);
        }
    }
    let offset = tk - tq; // absolute position of query row 0
    let mut data = vec![0.0; tq * tk];
    for i in 0..tq {
        for j in 0..tk {
            let masked = mask.map(|m| !m[j]).unwrap_or(false) || (causal && j > offset + i);
            if masked {
                data[i * tk + j] = MASK_NEG;
            }
        }
    }
    Ok(Some(fwd.tape.constant(Tensor { shape: vec![tq, tk], data })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{grad_check_store, Fwd, ParamStore, StoreMode};
    use crate::tensor::{Tape, Tensor};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn additive_fixture(heads: usize, seed: u64) -> (ParamStore, AdditiveAttention) {
        let mut store = ParamStore::new(StoreMode::Alloc);
        let mut b = ParamBuilder::new(&mut store, seed);
        let attn = AdditiveAttention::build(&mut b, "attn", 6, 8, heads).unwrap();
        (store, attn)
    }

    #[test]
    fn single_position_gets_full_weight() {
        let (store, attn) = additive_fixture(2, 3);
        let mut tape = Tape::new();
        let mut fwd = Fwd::new(&mut tape, &store, false, 0);
        let q = fwd.tape.constant(Tensor::full(&[1, 6], 0.3));
        let keys = fwd.tape.constant(Tensor::full(&[1, 8], 0.5));
        let kp = attn.project_keys(&mut fwd, keys).unwrap();
        let (ctx, weights) = attn.attend(&mut fwd, q, kp, keys, None, 0.0).unwrap();
        for w in &weights {
            assert_eq!(fwd.tape.value(*w).data, vec![1.0]);
        }
        // context equals out-projection of the single value row
        let wo = store.value(attn.wo);
        let value = fwd.tape.value(keys).data.clone();
        let got = fwd.tape.value(ctx).data.clone();
        for j in 0..8 {
            let want: f64 = (0..8).map(|i| value[i] * wo.at2(i, j)).sum();
            assert!((got[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let (store, attn) = additive_fixture(4, 5);
        let mut tape = Tape::new();
        let mut fwd = Fwd::new(&mut tape, &store, false, 0);
        let q = fwd.tape.constant(Tensor::full(&[1, 6], -0.2));
        let keys = fwd.tape.constant(Tensor::full(&[5, 8], 0.7));
        let kp = attn.project_keys(&mut fwd, keys).unwrap();
        let (_, weights) = attn.attend(&mut fwd, q, kp, keys, None, 0.0).unwrap();
        for w in &weights {
            for &x in &fwd.tape.value(*w).data {
                assert!((x - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weights_sum_to_one_and_match_straight_line_oracle() {
        let (store, attn) = additive_fixture(4, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let q_data: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k_data: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let mut fwd = Fwd::new(&mut tape, &store, false, 0);
        let q = fwd.tape.constant(Tensor::new(vec![1, 6], q_data.clone()).unwrap());
        let keys = fwd.tape.constant(Tensor::new(vec![3, 8], k_data.clone()).unwrap());
        let kp = attn.project_keys(&mut fwd, keys).unwrap();
        let (ctx, weights) = attn.attend(&mut fwd, q, kp, keys, None, 0.0).unwrap();

        for w in &weights {
            let sum: f64 = fwd.tape.value(*w).data.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(fwd.tape.value(*w).data.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }

        // independent single-loop re-implementation from raw parameter values
        let (wq, wk, sv, wo, bo) = (
            store.value(attn.wq),
            store.value(attn.wk),
            store.value(attn.score_v),
            store.value(attn.wo),
            store.value(attn.bo),
        );
        let dh = 2;
        let qp: Vec<f64> =
            (0..8).map(|j| (0..6).map(|i| q_data[i] * wq.at2(i, j)).sum()).collect();
        let kp_oracle: Vec<Vec<f64>> = (0..3)
            .map(|t| (0..8).map(|j| (0..8).map(|i| k_data[t * 8 + i] * wk.at2(i, j)).sum()).collect())
            .collect();
        let mut ctx_concat = vec![0.0; 8];
        for head in 0..4 {
            let mut scores = [0.0; 3];
            for t in 0..3 {
                for c in 0..dh {
                    let idx = head * dh + c;
                    scores[t] += sv.data[idx] * (qp[idx] + kp_oracle[t][idx]).tanh();
                }
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for t in 0..3 {
                let w = exps[t] / z;
                assert!((fwd.tape.value(weights[head]).data[t] - w).abs() < 1e-12);
                for c in 0..dh {
                    ctx_concat[head * dh + c] += w * k_data[t * 8 + head * dh + c];
                }
            }
        }
        let got = fwd.tape.value(ctx).data.clone();
        for j in 0..8 {
            let want: f64 =
                (0..8).map(|i| ctx_concat[i] * wo.at2(i, j)).sum::<f64>() + bo.data[j];
            assert!((got[j] - want).abs() < 1e-10, "{} vs {}", got[j], want);
        }
    }

    #[test]
    fn all_masked_is_an_error() {
        let (store, attn) = additive_fixture(2, 3);
        let mut tape = Tape::new();
        let mut fwd = Fwd::new(&mut tape, &store, false, 0);
        let q = fwd.tape.constant(Tensor::full(&[1, 6], 0.3));
        let keys = fwd.tape.constant(Tensor::full(&[2, 8], 0.5));
        let kp = attn.project_keys(&mut fwd, keys).unwrap();
        let out = attn.attend(&mut fwd, q, kp, keys, Some(&[false, false]), 0.0);
        assert!(matches!(out, Err(Error::AllMasked)));
    }

    #[test]
    fn masked_positions_get_zero_weight() {
        let (store, attn) = additive_fixture(2, 7);
        let mut tape = Tape::new();
        let mut fwd = Fwd::new(&mut tape, &store, false, 0);
        let q = fwd.tape.constant(Tensor::full(&[1, 6], 0.3));
        let keys = fwd.tape.constant(Tensor::full(&[3, 8], 0.5));
        let kp = attn.project_keys(&mut fwd, keys).unwrap();
        let (_, weights) =
            attn.attend(&mut fwd, q, kp, keys, Some(&[true, false, true]), 0.0).unwrap();
        for w in &weights {
            let data = &fwd.tape.value(*w).data;
            assert!(data[1].abs() < 1e-12);
            assert!((data[0] + data[2] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn additive_gradients_match_finite_differences() {
        let (store, attn) = additive_fixture(4, 21);
        let ids = attn.param_ids();
        let inputs = vec![Tensor::full(&[1, 6], 0.2), Tensor::full(&[3, 8], -0.15)];
        let err = grad_check_store(&store, &ids, &inputs, 1e-5, |fwd, vars| {
            let kp = attn.project_keys(fwd, vars[1])?;
            let (ctx, _) = attn.attend(fwd, vars[0], kp, vars[1], None, 0.0)?;
            let t = fwd.tape.tanh(ctx)?;
            fwd.tape.sum_all(t)
        })
        .unwrap();
        assert!(err <= 1e-4, "error {err}");
    }

    fn dot_fixture(heads: usize, dim: usize, kv: usize, seed: u64) -> (ParamStore, DotAttention) {
        let mut store = ParamStore::new(StoreMode::Alloc);
        let mut b = ParamBuilder::new(&mut store, seed);
        let attn = DotAttention::build(&mut b, "attn", dim, kv, heads).unwrap();
        (store, attn)
    }

    #[test]
    fn causal_first_step_has_single_legal_position() {
        let (store, attn) = dot_fixture(2, 6, 6, 13);
        let mut tape = Tape::new();
        let mut fwd = Fwd::new(&mut tape, &store, false, 0);
        let x = fwd.tape.constant(Tensor::full(&[1, 6], 0.4));
        let (_, weights) = attn.attend(&mut fwd, x, x, true, None, 0.0).unwrap();
        for w in &weights {
            assert_eq!(fwd.tape.value(*w).data, vec![1.0]);
        }
    }

    #[test]
    fn orthonormal_queries_prefer_matching_position() {
        // single head, identity Q/K projections, orthonormal rows
        let mut store = ParamStore::new(StoreMode::Alloc);
        let mut b = ParamBuilder::new(&mut store, 1);
        let attn = DotAttention::build(&mut b, "attn", 3, 3, 1).unwrap();
        let eye = Tensor::matrix(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        store.set_value(attn.wq, eye.clone()).unwrap();
        store.set_value(attn.wk, eye.clone()).unwrap();

        let mut tape = Tape::new();
        let mut fwd = Fwd::new(&mut tape, &store, false, 0);
        let x = fwd.tape.leaf(eye, false);
        let (_, weights) = attn.attend(&mut fwd, x, x, false, None, 0.0).unwrap();
        let w = fwd.tape.value(weights[0]);
        for i in 0..3 {
            for j in 0..3 {
                if j != i {
                    assert!(w.at2(i, i) > w.at2(i, j), "row {i} not peaked on diagonal");
                }
            }
        }
    }

    #[test]
    fn zero_queries_give_uniform_weights() {
        let (store, attn) = dot_fixture(2, 6, 6, 17);
        let mut tape = Tape::new();
        let mut fwd = Fwd::new(&mut tape, &store, false, 0);
        let q = fwd.tape.constant(Tensor::zeros(&[2, 6]));
        let kv = fwd.tape.constant(Tensor::full(&[4, 6], 0.3));
        // zero queries after projection with zero bias → tied scores
        let (_, weights) = attn.attend(&mut fwd, q, kv, false, None, 0.0).unwrap();
        for w in &weights {
            for &x in &fwd.tape.value(*w).data {
                assert!((x - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dot_gradients_match_finite_differences() {
        let (store, attn) = dot_fixture(2, 6, 4, 29);
        let ids = attn.param_ids();
        let inputs = vec![Tensor::full(&[3, 6], 0.2), Tensor::full(&[4, 4], -0.3)];
        let err = grad_check_store(&store, &ids, &inputs, 1e-5, |fwd, vars| {
            let (ctx, _) = attn.attend(fwd, vars[0], vars[1], true, None, 0.0)?;
            let t = fwd.tape.tanh(ctx)?;
            fwd.tape.sum_all(t)
        })
        .unwrap();
        assert!(err <= 1e-4, "error {err}");
    }
}
