//! Reverse-mode differentiation over a linear record of fused dense ops.
//!
//! Every op computes its value eagerly when pushed. [`Tape::backward`] walks
//! the record in reverse and accumulates exact gradients; nodes that do not
//! depend on any gradient-requiring leaf are skipped.

use crate::error::{Error, Result};
use crate::nn::tensor::{axpy, dot, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attention masking mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Mask {
    None,
    /// Key positions after the query position are excluded.
    Causal,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    AddRows {
        x: Var,
        table: Var,
    },
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        dilation: usize,
    },
    Reshape(Var),
    Concat(Vec<Var>),
    GatherTime {
        x: Var,
        index: Vec<usize>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    QuantileLoss {
        pred: Var,
        labels: Vec<f64>,
        quantiles: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// A leaf holding constant data or a parameter.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `y = x Wᵀ + b` over the trailing axis of `x`; `W` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.ndim() != 2 || xv.last_dim() != wv.shape()[1] {
            return Err(Error::shape(format!(
                "linear: input {:?} does not match weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (k_out, k_in) = (wv.shape()[0], wv.shape()[1]);
        if let Some(b) = b {
            if self.value(b).shape() != [k_out] {
                return Err(Error::shape(format!(
                    "linear: bias {:?} does not match {k_out} outputs",
                    self.value(b).shape()
                )));
            }
        }
        let rows = xv.rows();
        let mut out = vec![0.0; rows * k_out];
        let bias = b.map(|b| self.value(b).data());
        for r in 0..rows {
            let xr = &xv.data()[r * k_in..(r + 1) * k_in];
            let yr = &mut out[r * k_out..(r + 1) * k_out];
            for (j, y) in yr.iter_mut().enumerate() {
                let wj = &wv.data()[j * k_in..(j + 1) * k_in];
                *y = dot(xr, wj) + bias.map_or(0.0, |bb| bb[j]);
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("non-empty shape") = k_out;
        let value = Tensor::from_vec(&shape, out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("add: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds rows `0..p` of `table` (`[P, d]`, `P ≥ p`) to every `[p, d]` slab
    /// of `x` (`[..., p, d]`).
    pub fn add_rows(&mut self, x: Var, table: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ts = self.shape(table).to_vec();
        if xs.len() < 2 || ts.len() != 2 || ts[1] != xs[xs.len() - 1] || ts[0] < xs[xs.len() - 2] {
            return Err(Error::shape(format!("add_rows: {xs:?} vs table {ts:?}")));
        }
        let slab = xs[xs.len() - 2] * xs[xs.len() - 1];
        let mut value = self.value(x).clone();
        let tv = &self.value(table).data()[..slab];
        for chunk in value.data_mut().chunks_mut(slab) {
            for (a, b) in chunk.iter_mut().zip(tv) {
                *a += b;
            }
        }
        let rg = self.any_grad(&[x, table]);
        Ok(self.push(value, Op::AddRows { x, table }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| {
            let t = (GELU_C * (v + 0.044715 * v * v * v)).tanh();
            0.5 * v * (1.0 + t)
        });
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// Normalizes the trailing axis with `ε = 1e-5`, then applies `γ`, `β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let k = xv.last_dim();
        if k < 2 || self.shape(gamma) != [k] || self.shape(beta) != [k] {
            return Err(Error::shape(format!(
                "layer_norm: input {:?}, gamma {:?}, beta {:?}",
                xv.shape(),
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = xv.rows();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; rows * k];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * k];
        for r in 0..rows {
            let xr = &xv.data()[r * k..(r + 1) * k];
            let mean = xr.iter().sum::<f64>() / k as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..k {
                let h = (xr[c] - mean) * rs;
                xhat[r * k + c] = h;
                out[r * k + c] = h * g[c] + bt[c];
            }
        }
        let value = Tensor::from_vec(xv.shape(), out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Scaled dot-product attention over `heads` heads. `q` is `[B, pq, D]`,
    /// `k` and `v` are `[B, pk, D]`. A causal mask requires `pq == pk`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Mask) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q), self.shape(k), self.shape(v));
        if qs.len() != 3 || ks.len() != 3 || ks != vs || qs[0] != ks[0] || qs[2] != ks[2] {
            return Err(Error::shape(format!("attention: q {qs:?}, k {ks:?}, v {vs:?}")));
        }
        let (b, pq, d) = (qs[0], qs[1], qs[2]);
        let pk = ks[1];
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(
                "heads",
                format!("hidden width {d} is not divisible by {heads} heads"),
            ));
        }
        if mask == Mask::Causal && pq != pk {
            return Err(Error::shape(format!(
                "causal attention needs equal query/key lengths, got {pq} and {pk}"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; b * heads * pq * pk];
        let mut out = vec![0.0; b * pq * d];
        let mut scores = vec![0.0; pk];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..pq {
                    let qi = &qd[(bi * pq + i) * d + off..(bi * pq + i) * d + off + dh];
                    let limit = if mask == Mask::Causal { i + 1 } else { pk };
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..limit {
                        let kj = &kd[(bi * pk + j) * d + off..(bi * pk + j) * d + off + dh];
                        scores[j] = dot(qi, kj) * scale;
                        max = max.max(scores[j]);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut().take(limit) {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let prow = &mut probs[((bi * heads + h) * pq + i) * pk..][..pk];
                    for j in 0..limit {
                        prow[j] = scores[j] / z;
                    }
                    let orow = &mut out[(bi * pq + i) * d + off..(bi * pq + i) * d + off + dh];
                    for j in 0..limit {
                        let vj = &vd[(bi * pk + j) * d + off..(bi * pk + j) * d + off + dh];
                        axpy(prow[j], vj, orow);
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[b, pq, d], out)?;
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(value, Op::Attention { q, k, v, heads, probs }, rg))
    }

    /// Causal dilated convolution. `x` is `[B, C, d_in]`, `w` is
    /// `[k_c, d_in, d_out]`, `b` is `[d_out]`. Tap `k` reads time
    /// `t − (k_c − 1 − k)·dilation`; earlier times read zeros.
    pub fn conv1d_causal(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 3 || ws[1] != xs[2] || self.shape(b) != [ws[2]] {
            return Err(Error::shape(format!(
                "conv1d: input {xs:?}, kernel {ws:?}, bias {:?}",
                self.shape(b)
            )));
        }
        if dilation == 0 || ws[0] == 0 {
            return Err(Error::config("dilation", "kernel size and dilation must be at least 1"));
        }
        let (bsz, c, din) = (xs[0], xs[1], xs[2]);
        let (kc, dout) = (ws[0], ws[2]);
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; bsz * c * dout];
        for bi in 0..bsz {
            for t in 0..c {
                let yrow = &mut out[(bi * c + t) * dout..(bi * c + t + 1) * dout];
                yrow.copy_from_slice(bd);
                for k in 0..kc {
                    let back = (kc - 1 - k) * dilation;
                    if back > t {
                        continue;
                    }
                    let src = t - back;
                    for i in 0..din {
                        let xv = xd[(bi * c + src) * din + i];
                        axpy(xv, &wd[(k * din + i) * dout..(k * din + i + 1) * dout], yrow);
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[bsz, c, dout], out)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(value, Op::Conv1d { x, w, b, dilation }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Concatenates along the trailing axis. All inputs must agree on every
    /// leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape(format!("concat: {s:?} vs leading {lead:?}")));
            }
            width += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                let k = self.value(p).last_dim();
                out.extend_from_slice(&self.value(p).data()[r * k..(r + 1) * k]);
            }
        }
        let mut shape = lead;
        shape.push(width);
        let value = Tensor::from_vec(&shape, out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// `y[b, t, :] = x[b, index[t], :]` for `x` of shape `[B, p, k]`.
    pub fn gather_time(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || index.iter().any(|&i| i >= xs[1]) {
            return Err(Error::shape(format!(
                "gather_time: input {xs:?} with index up to {:?}",
                index.iter().max()
            )));
        }
        let (b, p, k) = (xs[0], xs[1], xs[2]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * index.len() * k);
        for bi in 0..b {
            for &j in index {
                out.extend_from_slice(&xd[(bi * p + j) * k..(bi * p + j + 1) * k]);
            }
        }
        let value = Tensor::from_vec(&[b, index.len(), k], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            value,
            Op::GatherTime {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Row lookup into `table` (`[V, d]`), producing `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || ids.iter().any(|&i| i >= ts[0]) {
            return Err(Error::shape(format!("embedding: table {ts:?}, ids out of range")));
        }
        let d = ts[1];
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let value = Tensor::from_vec(&[ids.len(), d], out)?;
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Summed pinball loss. `pred` is `[B, H, Q]`, `labels` is `B·H` long.
    pub fn quantile_loss(&mut self, pred: Var, labels: &[f64], quantiles: &[f64]) -> Result<Var> {
        let ps = self.shape(pred).to_vec();
        if ps.len() != 3 || ps[2] != quantiles.len() || ps[0] * ps[1] != labels.len() {
            return Err(Error::shape(format!(
                "quantile_loss: forecasts {ps:?}, {} labels, {} quantiles",
                labels.len(),
                quantiles.len()
            )));
        }
        let pd = self.value(pred).data();
        let q = quantiles.len();
        let mut total = 0.0;
        for (cell, &y) in labels.iter().enumerate() {
            for (qi, &tau) in quantiles.iter().enumerate() {
                total += crate::training::quantile_loss(y, pd[cell * q + qi], tau);
            }
        }
        let rg = self.any_grad(&[pred]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::QuantileLoss {
                pred,
                labels: labels.to_vec(),
                quantiles: quantiles.to_vec(),
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy over rows of `logits` (`[N, V]`).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != targets.len() || targets.iter().any(|&t| t >= ls[1]) {
            return Err(Error::shape(format!(
                "cross_entropy: logits {ls:?}, {} targets",
                targets.len()
            )));
        }
        let (n, v) = (ls[0], ls[1]);
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        for r in 0..n {
            let row = &ld[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            for c in 0..v {
                probs[r * v + c] = (row[c] - max).exp() / z;
            }
            total -= row[targets[r]] - max - z.ln();
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(node.value.shape())))
    }

    fn backprop_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let dyd = dy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (k_out, k_in) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.rows();
                if let Some(dx) = self.slot(grads, *x) {
                    let dxd = dx.data_mut();
                    for r in 0..rows {
                        let dxr = &mut dxd[r * k_in..(r + 1) * k_in];
                        for j in 0..k_out {
                            let g = dyd[r * k_out + j];
                            if g != 0.0 {
                                axpy(g, &wv.data()[j * k_in..(j + 1) * k_in], dxr);
                            }
                        }
                    }
                }
                if let Some(dw) = self.slot(grads, *w) {
                    let dwd = dw.data_mut();
                    for r in 0..rows {
                        let xr = &xv.data()[r * k_in..(r + 1) * k_in];
                        for j in 0..k_out {
                            let g = dyd[r * k_out + j];
                            if g != 0.0 {
                                axpy(g, xr, &mut dwd[j * k_in..(j + 1) * k_in]);
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(db) = self.slot(grads, *b) {
                        let dbd = db.data_mut();
                        for r in 0..rows {
                            for j in 0..k_out {
                                dbd[j] += dyd[r * k_out + j];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(g) = self.slot(grads, *v) {
                        g.add_assign(dy);
                    }
                }
            }
            Op::AddRows { x, table } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.add_assign(dy);
                }
                let xs = self.shape(*x);
                let slab = xs[xs.len() - 2] * xs[xs.len() - 1];
                if let Some(dt) = self.slot(grads, *table) {
                    let dtd = &mut dt.data_mut()[..slab];
                    for chunk in dyd.chunks(slab) {
                        for (a, b) in dtd.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((g, &v), &d) in dx.data_mut().iter_mut().zip(xd).zip(dyd) {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        *g += d * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                    }
                }
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((g, &v), &d) in dx.data_mut().iter_mut().zip(xd).zip(dyd) {
                        if v > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let k = self.value(*x).last_dim();
                let rows = rstd.len();
                let gd = self.value(*gamma).data();
                if let Some(dg) = self.slot(grads, *gamma) {
                    let dgd = dg.data_mut();
                    for r in 0..rows {
                        for c in 0..k {
                            dgd[c] += dyd[r * k + c] * xhat[r * k + c];
                        }
                    }
                }
                if let Some(dbeta) = self.slot(grads, *beta) {
                    let dbd = dbeta.data_mut();
                    for r in 0..rows {
                        for c in 0..k {
                            dbd[c] += dyd[r * k + c];
                        }
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let dxd = dx.data_mut();
                    let mut dxhat = vec![0.0; k];
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..k {
                            dxhat[c] = dyd[r * k + c] * gd[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xhat[r * k + c];
                        }
                        mean_d /= k as f64;
                        mean_dx /= k as f64;
                        for c in 0..k {
                            dxd[r * k + c] += rstd[r] * (dxhat[c] - mean_d - xhat[r * k + c] * mean_dx);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => self.backprop_attention(*q, *k, *v, *heads, probs, dyd, grads),
            Op::Conv1d { x, w, b, dilation } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (bsz, c, din) = (xs[0], xs[1], xs[2]);
                let (kc, dout) = (ws[0], ws[2]);
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                if let Some(db) = self.slot(grads, *b) {
                    let dbd = db.data_mut();
                    for row in dyd.chunks(dout) {
                        for (a, g) in dbd.iter_mut().zip(row) {
                            *a += g;
                        }
                    }
                }
                if let Some(dw) = self.slot(grads, *w) {
                    let dwd = dw.data_mut();
                    for bi in 0..bsz {
                        for t in 0..c {
                            let dyr = &dyd[(bi * c + t) * dout..(bi * c + t + 1) * dout];
                            for k in 0..kc {
                                let back = (kc - 1 - k) * dilation;
                                if back > t {
                                    continue;
                                }
                                let src = t - back;
                                for i in 0..din {
                                    let xv = xd[(bi * c + src) * din + i];
                                    axpy(xv, dyr, &mut dwd[(k * din + i) * dout..(k * din + i + 1) * dout]);
                                }
                            }
                        }
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let dxd = dx.data_mut();
                    for bi in 0..bsz {
                        for t in 0..c {
                            let dyr = &dyd[(bi * c + t) * dout..(bi * c + t + 1) * dout];
                            for k in 0..kc {
                                let back = (kc - 1 - k) * dilation;
                                if back > t {
                                    continue;
                                }
                                let src = t - back;
                                for i in 0..din {
                                    dxd[(bi * c + src) * din + i] +=
                                        dot(dyr, &wd[(k * din + i) * dout..(k * din + i + 1) * dout]);
                                }
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (a, g) in dx.data_mut().iter_mut().zip(dyd) {
                        *a += g;
                    }
                }
            }
            Op::Concat(parts) => {
                let width = dy.last_dim();
                let rows = dy.rows();
                let mut offset = 0;
                for p in parts {
                    let k = self.value(*p).last_dim();
                    if let Some(dp) = self.slot(grads, *p) {
                        let dpd = dp.data_mut();
                        for r in 0..rows {
                            for c in 0..k {
                                dpd[r * k + c] += dyd[r * width + offset + c];
                            }
                        }
                    }
                    offset += k;
                }
            }
            Op::GatherTime { x, index } => {
                let xs = self.shape(*x);
                let (b, p, k) = (xs[0], xs[1], xs[2]);
                if let Some(dx) = self.slot(grads, *x) {
                    let dxd = dx.data_mut();
                    let c = index.len();
                    for bi in 0..b {
                        for (t, &j) in index.iter().enumerate() {
                            let src = &dyd[(bi * c + t) * k..(bi * c + t + 1) * k];
                            let dst = &mut dxd[(bi * p + j) * k..(bi * p + j + 1) * k];
                            for (a, g) in dst.iter_mut().zip(src) {
                                *a += g;
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(dt) = self.slot(grads, *table) {
                    let dtd = dt.data_mut();
                    for (r, &i) in ids.iter().enumerate() {
                        for c in 0..d {
                            dtd[i * d + c] += dyd[r * d + c];
                        }
                    }
                }
            }
            Op::QuantileLoss {
                pred,
                labels,
                quantiles,
            } => {
                let pd = self.value(*pred).data();
                let q = quantiles.len();
                if let Some(dp) = self.slot(grads, *pred) {
                    let dpd = dp.data_mut();
                    for (cell, &y) in labels.iter().enumerate() {
                        for (qi, &tau) in quantiles.iter().enumerate() {
                            let yhat = pd[cell * q + qi];
                            let g = if y > yhat {
                                -tau
                            } else if y < yhat {
                                1.0 - tau
                            } else {
                                0.0
                            };
                            dpd[cell * q + qi] += dyd[0] * g;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.shape(*logits)[1];
                let n = targets.len() as f64;
                if let Some(dl) = self.slot(grads, *logits) {
                    let dld = dl.data_mut();
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..v {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            dld[r * v + c] += dyd[0] * (probs[r * v + c] - onehot) / n;
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        dyd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let qs = self.shape(q);
        let (b, pq, d) = (qs[0], qs[1], qs[2]);
        let pk = self.shape(k)[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        // dS is needed by both dq and dk, so compute it once.
        let mut ds_all = vec![0.0; b * heads * pq * pk];
        let mut dv_acc = if self.requires_grad(v) {
            Some(vec![0.0; b * pk * d])
        } else {
            None
        };
        for bi in 0..b {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..pq {
                    let dyi = &dyd[(bi * pq + i) * d + off..(bi * pq + i) * d + off + dh];
                    let base = ((bi * heads + h) * pq + i) * pk;
                    let prow = &probs[base..base + pk];
                    let mut dp = vec![0.0; pk];
                    let mut weighted = 0.0;
                    for j in 0..pk {
                        if prow[j] == 0.0 {
                            continue;
                        }
                        let vj = &vd[(bi * pk + j) * d + off..(bi * pk + j) * d + off + dh];
                        dp[j] = dot(dyi, vj);
                        weighted += prow[j] * dp[j];
                        if let Some(dv) = dv_acc.as_mut() {
                            axpy(
                                prow[j],
                                dyi,
                                &mut dv[(bi * pk + j) * d + off..(bi * pk + j) * d + off + dh],
                            );
                        }
                    }
                    for j in 0..pk {
                        ds_all[base + j] = prow[j] * (dp[j] - weighted);
                    }
                }
            }
        }
        if let (Some(dv), Some(slot)) = (dv_acc, self.slot(grads, v)) {
            for (a, g) in slot.data_mut().iter_mut().zip(&dv) {
                *a += g;
            }
        }
        if let Some(dq) = self.slot(grads, q) {
            let dqd = dq.data_mut();
            for bi in 0..b {
                for h in 0..heads {
                    let off = h * dh;
                    for i in 0..pq {
                        let base = ((bi * heads + h) * pq + i) * pk;
                        let dqi = &mut dqd[(bi * pq + i) * d + off..(bi * pq + i) * d + off + dh];
                        for j in 0..pk {
                            let s = ds_all[base + j];
                            if s != 0.0 {
                                let kj = &kd[(bi * pk + j) * d + off..(bi * pk + j) * d + off + dh];
                                axpy(s * scale, kj, dqi);
                            }
                        }
                    }
                }
            }
        }
        if let Some(dk) = self.slot(grads, k) {
            let dkd = dk.data_mut();
            for bi in 0..b {
                for h in 0..heads {
                    let off = h * dh;
                    for i in 0..pq {
                        let base = ((bi * heads + h) * pq + i) * pk;
                        let qi = &qd[(bi * pq + i) * d + off..(bi * pq + i) * d + off + dh];
                        for j in 0..pk {
                            let s = ds_all[base + j];
                            if s != 0.0 {
                                axpy(
                                    s * scale,
                                    qi,
                                    &mut dkd[(bi * pk + j) * d + off..(bi * pk + j) * d + off + dh],
                                );
                            }
                        }
                    }
                }
            }
        }
    }
}
