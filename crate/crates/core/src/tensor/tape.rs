//! Wengert tape: records forward operations, replays them in reverse.
//!
//! Every op returns a [`Var`] indexing a node on the tape. Nodes keep the
//! forward value; gradients are materialized by [`Tape::backward`] and kept
//! only for leaves that requested them. A tape is confined to one execution
//! context; independent tapes may run in parallel contexts.
//!
//! Forward math ops validate shapes and check their outputs for NaN/Inf
//! eagerly, so an exploding model surfaces as `NonFiniteValue` at the op
//! that produced it. Pure data-movement ops (narrow, concat, reshape,
//! transpose, gather) skip the finiteness scan since their inputs already
//! passed it.

use crate::error::{Error, Result};
use crate::tensor::{axis_blocks, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    ScaleConst(Var, f64),
    AddBias(Var, Var),
    MulScalar(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Sqrt(Var),
    SumAll(Var),
    MeanAll(Var),
    VarAll(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { src: Var, axis: usize, start: usize, len: usize },
    Reshape(Var),
    Transpose(Var),
    Gather { table: Var, ids: Vec<usize> },
    Conv1d { input: Var, kernel: Var, pad_left: usize },
    LayerNorm { input: Var, gain: Var, bias: Var, eps: f64 },
    SmoothedNll { logp: Var, targets: Vec<usize>, uncertainty: f64 },
    GradScale(Var, f64),
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Reverse-mode differentiation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a tensor as a leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, grad: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Convenience: constant leaf, never differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Scalar value of a one-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert!(self.nodes[v.0].value.is_scalar());
        self.nodes[v.0].value.data[0]
    }

    /// Gradient of a leaf after `backward`; `None` if never reached or not tracked.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor { shape: node.value.shape.clone(), data: g.clone() })
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool, check: &'static str) -> Result<Var> {
        if !check.is_empty() && !value.all_finite() {
            return Err(Error::NonFiniteValue { op: check });
        }
        self.nodes.push(Node { op, value, grad: None, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- forward ops -------------------------------------------------

    /// 2-D matrix product `[m,k]·[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.shape, tb.shape)));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = ta.data[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &tb.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        let req = self.requires(a) || self.requires(b);
        self.push(Op::MatMul(a, b), Tensor { shape: vec![m, n], data: out }, req, "matmul")
    }

    fn binary_elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(Error::shape(name, format!("{:?} vs {:?}", ta.shape, tb.shape)));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor { shape: ta.shape.clone(), data };
        let req = self.requires(a) || self.requires(b);
        self.push(op, value, req, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let value = Tensor { shape: ta.shape.clone(), data: ta.data.iter().map(|&x| x * c).collect() };
        let req = self.requires(a);
        self.push(Op::ScaleConst(a, c), value, req, "scale")
    }

    /// Trailing-axis broadcast add: `x[..., d] + b[d]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let d = tx.last_dim();
        if tb.rank() != 1 || tb.shape[0] != d {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", tx.shape, tb.shape)));
        }
        let mut data = tx.data.clone();
        for row in data.chunks_mut(d) {
            for (o, &bv) in row.iter_mut().zip(&tb.data) {
                *o += bv;
            }
        }
        let value = Tensor { shape: tx.shape.clone(), data };
        let req = self.requires(x) || self.requires(b);
        self.push(Op::AddBias(x, b), value, req, "add_bias")
    }

    /// Multiply a tensor by a one-element variable.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (&self.nodes[x.0].value, &self.nodes[s.0].value);
        if !ts.is_scalar() {
            return Err(Error::shape("mul_scalar", format!("scalar has shape {:?}", ts.shape)));
        }
        let sv = ts.data[0];
        let value = Tensor { shape: tx.shape.clone(), data: tx.data.iter().map(|&v| v * sv).collect() };
        let req = self.requires(x) || self.requires(s);
        self.push(Op::MulScalar(x, s), value, req, "mul_scalar")
    }

    fn unary(&mut self, a: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let value = Tensor { shape: ta.shape.clone(), data: ta.data.iter().map(|&x| f(x)).collect() };
        let req = self.requires(a);
        self.push(op, value, req, name)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "sigmoid", stable_sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "tanh", f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "relu", |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "sqrt", f64::sqrt, Op::Sqrt(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        let req = self.requires(a);
        self.push(Op::SumAll(a), Tensor::scalar(s), req, "sum_all")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let m = t.data.iter().sum::<f64>() / t.numel() as f64;
        let req = self.requires(a);
        self.push(Op::MeanAll(a), Tensor::scalar(m), req, "mean_all")
    }

    /// Population variance over all elements.
    pub fn var_all(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let n = t.numel() as f64;
        let mean = t.data.iter().sum::<f64>() / n;
        let var = t.data.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let req = self.requires(a);
        self.push(Op::VarAll(a), Tensor::scalar(var), req, "var_all")
    }

    /// Softmax along the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let d = ta.last_dim();
        let mut data = vec![0.0; ta.numel()];
        for (orow, irow) in data.chunks_mut(d).zip(ta.data.chunks(d)) {
            let max = irow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &x) in orow.iter_mut().zip(irow) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let value = Tensor { shape: ta.shape.clone(), data };
        let req = self.requires(a);
        self.push(Op::Softmax(a), value, req, "softmax")
    }

    /// Log-softmax along the trailing axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let d = ta.last_dim();
        let mut data = vec![0.0; ta.numel()];
        for (orow, irow) in data.chunks_mut(d).zip(ta.data.chunks(d)) {
            let max = irow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = irow.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            for (o, &x) in orow.iter_mut().zip(irow) {
                *o = x - lse;
            }
        }
        let value = Tensor { shape: ta.shape.clone(), data };
        let req = self.requires(a);
        self.push(Op::LogSoftmax(a), value, req, "log_softmax")
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no parts"));
        }
        let first = &self.nodes[parts[0].0].value.shape;
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let mut axis_total = 0;
        for p in parts {
            let s = &self.nodes[p.0].value.shape;
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", s, first)));
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let (outer, _, inner) = axis_blocks(&shape, axis);
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            let alen = t.shape[axis];
            for o in 0..outer {
                let src = &t.data[o * alen * inner..(o + 1) * alen * inner];
                let dst_start = (o * axis_total + offset) * inner;
                data[dst_start..dst_start + alen * inner].copy_from_slice(src);
            }
            offset += alen;
        }
        let req = parts.iter().any(|&p| self.requires(p));
        self.push(Op::Concat { parts: parts.to_vec(), axis }, Tensor { shape, data }, req, "")
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, src: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[src.0].value;
        if axis >= t.rank() || start + len > t.shape[axis] || len == 0 {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} [{start}..{}] of {:?}", start + len, t.shape),
            ));
        }
        let (outer, alen, inner) = axis_blocks(&t.shape, axis);
        let mut shape = t.shape.clone();
        shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_start = (o * alen + start) * inner;
            data[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&t.data[src_start..src_start + len * inner]);
        }
        let req = self.requires(src);
        self.push(Op::Narrow { src, axis, start, len }, Tensor { shape, data }, req, "")
    }

    /// Split along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, src: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let total: usize = sizes.iter().sum();
        if total != self.nodes[src.0].value.shape[axis] {
            return Err(Error::shape("split", format!("sizes {:?} along axis {axis}", sizes)));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &len in sizes {
            out.push(self.narrow(src, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", t.shape, shape)));
        }
        let value = Tensor { shape, data: t.data.clone() };
        let req = self.requires(a);
        self.push(Op::Reshape(a), value, req, "")
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.rank() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", t.shape)));
        }
        let (m, n) = (t.shape[0], t.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = t.data[i * n + j];
            }
        }
        let req = self.requires(a);
        self.push(Op::Transpose(a), Tensor { shape: vec![n, m], data }, req, "")
    }

    /// Row gather from an embedding table `[V, d]` into `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = &self.nodes[table.0].value;
        if t.rank() != 2 {
            return Err(Error::shape("gather", format!("table {:?}", t.shape)));
        }
        let (v, d) = (t.shape[0], t.shape[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::TargetOutOfRange { id: bad, vocab: v });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&t.data[id * d..(id + 1) * d]);
        }
        let value = Tensor { shape: vec![ids.len(), d], data };
        let req = self.requires(table);
        self.push(Op::Gather { table, ids: ids.to_vec() }, value, req, "")
    }

    /// 1-D convolution over `x[T, c_in]` with kernel `[w, c_in, c_out]` and
    /// explicit zero padding; output length is `T + pads - w + 1`.
    pub fn conv1d(&mut self, input: Var, kernel: Var, pad_left: usize, pad_right: usize) -> Result<Var> {
        let (tx, tk) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value);
        if tx.rank() != 2 || tk.rank() != 3 || tx.shape[1] != tk.shape[1] {
            return Err(Error::shape("conv1d", format!("x {:?}, kernel {:?}", tx.shape, tk.shape)));
        }
        let (t_in, c_in) = (tx.shape[0], tx.shape[1]);
        let (w, _, c_out) = (tk.shape[0], tk.shape[1], tk.shape[2]);
        let padded = t_in + pad_left + pad_right;
        if padded + 1 <= w {
            return Err(Error::shape("conv1d", format!("width {w} exceeds padded length {padded}")));
        }
        let t_out = padded - w + 1;
        let mut out = vec![0.0; t_out * c_out];
        for t in 0..t_out {
            let orow = &mut out[t * c_out..(t + 1) * c_out];
            for u in 0..w {
                let src = (t + u) as isize - pad_left as isize;
                if src < 0 || src >= t_in as isize {
                    continue;
                }
                let xrow = &tx.data[src as usize * c_in..(src as usize + 1) * c_in];
                for (ci, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let krow = &tk.data[(u * c_in + ci) * c_out..(u * c_in + ci + 1) * c_out];
                    for (o, &kv) in orow.iter_mut().zip(krow) {
                        *o += xv * kv;
                    }
                }
            }
        }
        let req = self.requires(input) || self.requires(kernel);
        self.push(
            Op::Conv1d { input, kernel, pad_left },
            Tensor { shape: vec![t_out, c_out], data: out },
            req,
            "conv1d",
        )
    }

    /// Layer normalization over the trailing axis with learned gain/bias:
    /// `gain ⊙ (x − mean) / sqrt(var + eps) + bias`, population variance.
    pub fn layer_norm(&mut self, input: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) =
            (&self.nodes[input.0].value, &self.nodes[gain.0].value, &self.nodes[bias.0].value);
        let d = tx.last_dim();
        if tg.shape != [d] || tb.shape != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", tx.shape, tg.shape, tb.shape),
            ));
        }
        let mut data = vec![0.0; tx.numel()];
        for (orow, irow) in data.chunks_mut(d).zip(tx.data.chunks(d)) {
            let (mean, var) = row_moments(irow);
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                orow[j] = tg.data[j] * (irow[j] - mean) * inv + tb.data[j];
            }
        }
        let value = Tensor { shape: tx.shape.clone(), data };
        let req = self.requires(input) || self.requires(gain) || self.requires(bias);
        self.push(Op::LayerNorm { input, gain, bias, eps }, value, req, "layer_norm")
    }

    /// Per-row smoothed negative log-likelihood from log-probabilities
    /// `[B, V]`: `-(1-u)·logp[target] - (u/V)·Σ logp`, returned as `[B, 1]`.
    pub fn smoothed_nll(&mut self, logp: Var, targets: &[usize], uncertainty: f64) -> Result<Var> {
        let t = &self.nodes[logp.0].value;
        if t.rank() != 2 || t.shape[0] != targets.len() {
            return Err(Error::shape(
                "smoothed_nll",
                format!("logp {:?} with {} targets", t.shape, targets.len()),
            ));
        }
        let v = t.shape[1];
        if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
            return Err(Error::TargetOutOfRange { id: bad, vocab: v });
        }
        let u = uncertainty;
        let mut data = Vec::with_capacity(targets.len());
        for (b, row) in t.data.chunks(v).enumerate() {
            let sum: f64 = row.iter().sum();
            data.push(-(1.0 - u) * row[targets[b]] - u / v as f64 * sum);
        }
        let value = Tensor { shape: vec![targets.len(), 1], data };
        let req = self.requires(logp);
        self.push(Op::SmoothedNll { logp, targets: targets.to_vec(), uncertainty }, value, req, "smoothed_nll")
    }

    /// Identity forward; multiplies the backward flow by `factor`.
    pub fn grad_scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.nodes[a.0].value.clone();
        let req = self.requires(a);
        self.push(Op::GradScale(a, factor), value, req, "")
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients accumulate into every
    /// tracked leaf; intermediate gradients are freed as the sweep passes
    /// them. The tape stays valid afterwards (values and leaf gradients
    /// remain readable); a second backward accumulates on top.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(Error::NotScalarLoss(loss_node.value.shape.clone()));
        }
        if !loss_node.requires_grad {
            return Ok(()); // nothing tracked below the loss
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                // leaves keep their gradient for retrieval
                accumulate_into(&mut self.nodes[i].grad, &g);
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.backprop(&op, i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop(&self, op: &Op, node: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        let out_val = &self.nodes[node].value;
        match *op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if self.requires(a) {
                    let da = grads[a.0].get_or_insert_with(|| vec![0.0; ta.numel()]);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &tb.data[p * n..(p + 1) * n];
                            let mut s = 0.0;
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            da[i * k + p] += s;
                        }
                    }
                }
                if self.requires(b) {
                    let db = grads[b.0].get_or_insert_with(|| vec![0.0; tb.numel()]);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ta.data[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let drow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                drow[j] += aip * grow[j];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, a, g, |gi, _| gi);
                self.acc(grads, b, g, |gi, _| gi);
            }
            Op::Sub(a, b) => {
                self.acc(grads, a, g, |gi, _| gi);
                self.acc(grads, b, g, |gi, _| -gi);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                self.acc(grads, a, g, |gi, i| gi * tb.data[i]);
                self.acc(grads, b, g, |gi, i| gi * ta.data[i]);
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(a), val(b));
                self.acc(grads, a, g, |gi, i| gi / tb.data[i]);
                self.acc(grads, b, g, |gi, i| -gi * ta.data[i] / (tb.data[i] * tb.data[i]));
            }
            Op::ScaleConst(a, c) => self.acc(grads, a, g, |gi, _| gi * c),
            Op::AddBias(x, b) => {
                self.acc(grads, x, g, |gi, _| gi);
                if self.requires(b) {
                    let d = val(b).shape[0];
                    let db = grads[b.0].get_or_insert_with(|| vec![0.0; d]);
                    for row in g.chunks(d) {
                        for (dj, &gj) in db.iter_mut().zip(row) {
                            *dj += gj;
                        }
                    }
                }
            }
            Op::MulScalar(x, s) => {
                let sv = val(s).data[0];
                let tx = val(x);
                self.acc(grads, x, g, |gi, _| gi * sv);
                if self.requires(s) {
                    let ds = grads[s.0].get_or_insert_with(|| vec![0.0; 1]);
                    ds[0] += g.iter().zip(&tx.data).map(|(&gi, &xi)| gi * xi).sum::<f64>();
                }
            }
            Op::Sigmoid(a) => {
                let y = &out_val.data;
                self.acc(grads, a, g, |gi, i| gi * y[i] * (1.0 - y[i]));
            }
            Op::Tanh(a) => {
                let y = &out_val.data;
                self.acc(grads, a, g, |gi, i| gi * (1.0 - y[i] * y[i]));
            }
            Op::Relu(a) => {
                let x = &val(a).data;
                self.acc(grads, a, g, |gi, i| if x[i] > 0.0 { gi } else { 0.0 });
            }
            Op::Sqrt(a) => {
                let y = &out_val.data;
                self.acc(grads, a, g, |gi, i| gi * 0.5 / y[i]);
            }
            Op::SumAll(a) => {
                let g0 = g[0];
                self.acc_broadcast(grads, a, |_| g0);
            }
            Op::MeanAll(a) => {
                let n = val(a).numel() as f64;
                let g0 = g[0] / n;
                self.acc_broadcast(grads, a, |_| g0);
            }
            Op::VarAll(a) => {
                let ta = val(a);
                let n = ta.numel() as f64;
                let mean = ta.data.iter().sum::<f64>() / n;
                let g0 = g[0];
                self.acc_broadcast(grads, a, |i| g0 * 2.0 * (ta.data[i] - mean) / n);
            }
            Op::Softmax(a) => {
                if self.requires(a) {
                    let y = &out_val.data;
                    let d = out_val.last_dim();
                    let da = grads[a.0].get_or_insert_with(|| vec![0.0; y.len()]);
                    for r in 0..y.len() / d {
                        let (ys, gs) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let dot: f64 = ys.iter().zip(gs).map(|(&yi, &gi)| yi * gi).sum();
                        let drow = &mut da[r * d..(r + 1) * d];
                        for j in 0..d {
                            drow[j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if self.requires(a) {
                    let y = &out_val.data; // log-probs
                    let d = out_val.last_dim();
                    let da = grads[a.0].get_or_insert_with(|| vec![0.0; y.len()]);
                    for r in 0..y.len() / d {
                        let (ys, gs) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let gsum: f64 = gs.iter().sum();
                        let drow = &mut da[r * d..(r + 1) * d];
                        for j in 0..d {
                            drow[j] += gs[j] - ys[j].exp() * gsum;
                        }
                    }
                }
            }
            Op::Concat { ref parts, axis } => {
                let shape = &out_val.shape;
                let (outer, total, inner) = axis_blocks(shape, axis);
                let mut offset = 0;
                for p in parts {
                    let alen = val(*p).shape[axis];
                    if self.requires(*p) {
                        let numel = val(*p).numel();
                        let dp = grads[p.0].get_or_insert_with(|| vec![0.0; numel]);
                        for o in 0..outer {
                            let src_start = (o * total + offset) * inner;
                            let dst = &mut dp[o * alen * inner..(o + 1) * alen * inner];
                            for (dv, &gv) in dst.iter_mut().zip(&g[src_start..src_start + alen * inner]) {
                                *dv += gv;
                            }
                        }
                    }
                    offset += alen;
                }
            }
            Op::Narrow { src, axis, start, len } => {
                if self.requires(src) {
                    let t = val(src);
                    let (outer, alen, inner) = axis_blocks(&t.shape, axis);
                    let ds = grads[src.0].get_or_insert_with(|| vec![0.0; t.numel()]);
                    for o in 0..outer {
                        let dst_start = (o * alen + start) * inner;
                        let src_slice = &g[o * len * inner..(o + 1) * len * inner];
                        for (dv, &gv) in ds[dst_start..dst_start + len * inner].iter_mut().zip(src_slice) {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::Reshape(a) | Op::GradScale(a, _) => {
                let factor = if let Op::GradScale(_, f) = *op { f } else { 1.0 };
                self.acc(grads, a, g, |gi, _| gi * factor);
            }
            Op::Transpose(a) => {
                if self.requires(a) {
                    let t = val(a);
                    let (m, n) = (t.shape[0], t.shape[1]);
                    let da = grads[a.0].get_or_insert_with(|| vec![0.0; t.numel()]);
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Gather { table, ref ids } => {
                if self.requires(table) {
                    let t = val(table);
                    let d = t.shape[1];
                    let dt = grads[table.0].get_or_insert_with(|| vec![0.0; t.numel()]);
                    for (r, &id) in ids.iter().enumerate() {
                        let grow = &g[r * d..(r + 1) * d];
                        for (dv, &gv) in dt[id * d..(id + 1) * d].iter_mut().zip(grow) {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::Conv1d { input, kernel, pad_left } => {
                let (tx, tk) = (val(input), val(kernel));
                let (t_in, c_in) = (tx.shape[0], tx.shape[1]);
                let (w, c_out) = (tk.shape[0], tk.shape[2]);
                let t_out = out_val.shape[0];
                if self.requires(kernel) {
                    let dk = grads[kernel.0].get_or_insert_with(|| vec![0.0; tk.numel()]);
                    for t in 0..t_out {
                        let grow = &g[t * c_out..(t + 1) * c_out];
                        for u in 0..w {
                            let src = (t + u) as isize - pad_left as isize;
                            if src < 0 || src >= t_in as isize {
                                continue;
                            }
                            let xrow = &tx.data[src as usize * c_in..(src as usize + 1) * c_in];
                            for (ci, &xv) in xrow.iter().enumerate() {
                                if xv == 0.0 {
                                    continue;
                                }
                                let drow = &mut dk[(u * c_in + ci) * c_out..(u * c_in + ci + 1) * c_out];
                                for (dv, &gv) in drow.iter_mut().zip(grow) {
                                    *dv += xv * gv;
                                }
                            }
                        }
                    }
                }
                if self.requires(input) {
                    let dx = grads[input.0].get_or_insert_with(|| vec![0.0; tx.numel()]);
                    for t in 0..t_out {
                        let grow = &g[t * c_out..(t + 1) * c_out];
                        for u in 0..w {
                            let src = (t + u) as isize - pad_left as isize;
                            if src < 0 || src >= t_in as isize {
                                continue;
                            }
                            let dxrow = &mut dx[src as usize * c_in..(src as usize + 1) * c_in];
                            for ci in 0..c_in {
                                let krow = &tk.data[(u * c_in + ci) * c_out..(u * c_in + ci + 1) * c_out];
                                let mut s = 0.0;
                                for (kv, &gv) in krow.iter().zip(grow) {
                                    s += kv * gv;
                                }
                                dxrow[ci] += s;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { input, gain, bias, eps } => {
                let (tx, tg) = (val(input), val(gain));
                let d = tx.last_dim();
                let rows = tx.numel() / d;
                for r in 0..rows {
                    let xrow = &tx.data[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let (mean, var) = row_moments(xrow);
                    let inv = 1.0 / (var + eps).sqrt();
                    // xhat recomputed; dxhat = g ⊙ gain
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        let xh = (xrow[j] - mean) * inv;
                        let dxh = grow[j] * tg.data[j];
                        s1 += dxh;
                        s2 += dxh * xh;
                    }
                    if self.requires(input) {
                        let dx = grads[input.0].get_or_insert_with(|| vec![0.0; tx.numel()]);
                        let n = d as f64;
                        for j in 0..d {
                            let xh = (xrow[j] - mean) * inv;
                            let dxh = grow[j] * tg.data[j];
                            dx[r * d + j] += inv * (dxh - s1 / n - xh * s2 / n);
                        }
                    }
                    if self.requires(gain) {
                        let dg = grads[gain.0].get_or_insert_with(|| vec![0.0; d]);
                        for j in 0..d {
                            let xh = (xrow[j] - mean) * inv;
                            dg[j] += grow[j] * xh;
                        }
                    }
                    if self.requires(bias) {
                        let db = grads[bias.0].get_or_insert_with(|| vec![0.0; d]);
                        for j in 0..d {
                            db[j] += grow[j];
                        }
                    }
                }
            }
            Op::SmoothedNll { logp, ref targets, uncertainty } => {
                if self.requires(logp) {
                    let t = val(logp);
                    let v = t.shape[1];
                    let u = uncertainty;
                    let dl = grads[logp.0].get_or_insert_with(|| vec![0.0; t.numel()]);
                    for (b, &tgt) in targets.iter().enumerate() {
                        let gb = g[b];
                        let drow = &mut dl[b * v..(b + 1) * v];
                        let uniform = -gb * u / v as f64;
                        for dv in drow.iter_mut() {
                            *dv += uniform;
                        }
                        drow[tgt] += -gb * (1.0 - u);
                    }
                }
            }
        }
    }

    /// Elementwise accumulation helper: `grads[a] += f(g[i], i)`.
    fn acc(&self, grads: &mut [Option<Vec<f64>>], a: Var, g: &[f64], f: impl Fn(f64, usize) -> f64) {
        if self.requires(a) {
            let da = grads[a.0].get_or_insert_with(|| vec![0.0; g.len()]);
            for (i, dv) in da.iter_mut().enumerate() {
                *dv += f(g[i], i);
            }
        }
    }

    /// Accumulation for reductions: every input element receives `f(i)`.
    fn acc_broadcast(&self, grads: &mut [Option<Vec<f64>>], a: Var, f: impl Fn(usize) -> f64) {
        if self.requires(a) {
            let n = self.nodes[a.0].value.numel();
            let da = grads[a.0].get_or_insert_with(|| vec![0.0; n]);
            for (i, dv) in da.iter_mut().enumerate() {
                *dv += f(i);
            }
        }
    }
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate_into(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(existing) => {
            for (e, &v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
        let t = Tensor::matrix(rows).unwrap();
        tape.leaf(t, true)
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = leaf(&mut tape, &[vec![1.0], vec![1.0]]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data, vec![3.0, 7.0]);
        assert_eq!(tape.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[vec![1.0, 2.0]]);
        let b = leaf(&mut tape, &[vec![1.0, 2.0]]);
        assert!(matches!(tape.matmul(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_of_zeros_is_uniform_and_sums_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[0.0, 0.0, 0.0]), false);
        let y = tape.softmax(x).unwrap();
        for &v in &tape.value(y).data {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let sum: f64 = tape.value(y).data.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[0.0]), false);
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).data[0], 0.5);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[1.0, -2.0, 5.0]), true);
        let loss = tape.sum_all(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data, vec![2.0, 4.0]);
    }

    #[test]
    fn backward_of_sigmoid_sum_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[0.0]), true);
        let s = tape.sigmoid(x).unwrap();
        let loss = tape.sum_all(s).unwrap();
        tape.backward(loss).unwrap();
        assert!((tape.grad(x).unwrap().data[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_demands_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::NotScalarLoss(_))));
    }

    #[test]
    fn non_finite_forward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[1e308]), false);
        let y = tape.leaf(Tensor::vector(&[1e308]), false);
        let s = tape.add(x, y);
        assert!(matches!(s, Err(Error::NonFiniteValue { .. })));
    }

    #[test]
    fn tape_linearity_sum_of_losses() {
        // backward(l1 + l2) equals grad(l1) + grad(l2) computed separately
        let point = Tensor::vector(&[0.3, -0.7, 1.1]);
        let single = |which: usize| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.leaf(point.clone(), true);
            let l = if which == 0 {
                let s = tape.sigmoid(x).unwrap();
                tape.sum_all(s).unwrap()
            } else {
                let m = tape.mul(x, x).unwrap();
                tape.sum_all(m).unwrap()
            };
            tape.backward(l).unwrap();
            tape.grad(x).unwrap().data
        };
        let (g1, g2) = (single(0), single(1));

        let mut tape = Tape::new();
        let x = tape.leaf(point, true);
        let s = tape.sigmoid(x).unwrap();
        let l1 = tape.sum_all(s).unwrap();
        let m = tape.mul(x, x).unwrap();
        let l2 = tape.sum_all(m).unwrap();
        let l = tape.add(l1, l2).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(x).unwrap().data;
        for i in 0..3 {
            assert!((g[i] - (g1[i] + g2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_and_narrow_roundtrip() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = leaf(&mut tape, &[vec![5.0, 6.0]]);
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.shape(c), &[3, 2]);
        let back = tape.narrow(c, 0, 2, 1).unwrap();
        assert_eq!(tape.value(back).data, vec![5.0, 6.0]);

        let d = tape.concat(&[a, a], 1).unwrap();
        assert_eq!(tape.shape(d), &[2, 4]);
        assert_eq!(tape.value(d).data, vec![1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
    }

    #[test]
    fn split_covers_axis() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[vec![1.0, 2.0, 3.0, 4.0]]);
        let parts = tape.split(a, 1, &[1, 3]).unwrap();
        assert_eq!(tape.value(parts[0]).data, vec![1.0]);
        assert_eq!(tape.value(parts[1]).data, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn gather_rows_and_backward() {
        let mut tape = Tape::new();
        let table = leaf(&mut tape, &[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let picked = tape.gather(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(picked).data, vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = tape.sum_all(picked).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(table).unwrap().data, vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn layer_norm_matches_hand_value() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[1.0, 2.0, 3.0]).into_row(), false);
        let g = tape.leaf(Tensor::vector(&[1.0, 1.0, 1.0]), false);
        let b = tape.leaf(Tensor::vector(&[0.0, 0.0, 0.0]), false);
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let want = [-1.224745, 0.0, 1.224745];
        for (got, want) in tape.value(y).data.iter().zip(want) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn log_softmax_matches_softmax_log() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[0.1, -2.0, 3.0]), false);
        let ls = tape.log_softmax(x).unwrap();
        let sm = tape.softmax(x).unwrap();
        for (a, b) in tape.value(ls).data.iter().zip(&tape.value(sm).data) {
            assert!((a - b.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_scale_multiplies_backward_only() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[2.0]), true);
        let y = tape.grad_scale(x, 0.25).unwrap();
        assert_eq!(tape.value(y).data, vec![2.0]);
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        // d(x^2)/dx = 4, scaled by 0.25
        assert!((tape.grad(x).unwrap().data[0] - 1.0).abs() < 1e-15);
    }
}

#[cfg(test)]
impl Tensor {
    /// Test helper: view a vector as a single-row matrix.
    fn into_row(self) -> Tensor {
        let n = self.numel();
        Tensor { shape: vec![1, n], data: self.data }
    }
}
