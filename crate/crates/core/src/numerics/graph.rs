//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every differentiable op in execution order together with
//! the values the backward rule needs. [`Graph::backward`] walks the tape in
//! exact reverse order and may run only once per tape.

use std::collections::HashMap;

use rand::Rng;

use super::kernels::{self, Conv1dGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
pub struct AttentionMeta {
    pub batch: usize,
    pub seq_len: usize,
    pub n_heads: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Gelu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        meta: AttentionMeta,
        lens: Vec<usize>,
        probs: Vec<f64>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    MeanPool {
        x: Var,
        seq_len: usize,
        lens: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        row_weights: Vec<f64>,
        probs: Vec<f64>,
        denom: f64,
    },
    Huber {
        pred: Var,
        residual: Vec<f64>,
        mask: Vec<bool>,
        delta: f64,
        denom: f64,
    },
    StraightThrough(Var),
    Dropout {
        x: Var,
        keep_scale: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        geom: Conv1dGeom,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        b: Var,
        geom: Conv1dGeom,
    },
    ChannelsLast {
        x: Var,
        batch: usize,
        channels: usize,
        time: usize,
    },
    ChannelsFirst {
        x: Var,
        batch: usize,
        channels: usize,
        time: usize,
    },
    SliceTime {
        x: Var,
        start: usize,
        time_in: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

/// Recording tape for one forward/backward pass.
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    backward_done: bool,
    kink_margin: f64,
    branch_signature: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: HashMap::new(),
            backward_done: false,
            kink_margin: f64::INFINITY,
            branch_signature: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Smallest distance to a non-smooth locus seen by any op on this tape.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    /// Hash of every discrete branch decision taken on this tape.
    pub fn branch_signature(&self) -> u64 {
        self.branch_signature
    }

    /// Records a discrete decision (e.g. a quantizer argmin) and how close it was to flipping.
    pub fn note_branch(&mut self, key: u64, margin: f64) {
        self.branch_signature = (self.branch_signature ^ key).wrapping_mul(0x0100_0000_01b3);
        self.kink_margin = self.kink_margin.min(margin);
    }

    fn push(
        &mut self,
        value: Tensor,
        op: Op,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input or constant leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Binds a trainable parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    /// Gradient-stopped copy of `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| f(x)).collect(),
        )
        .expect("shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.unary(a, |x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg, "scale")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let t = self.unary(a, |x| x * x);
        let rg = self.rg(a);
        self.push(t, Op::Square(a), rg, "square")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.unary(a, gelu);
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg, "gelu")
    }

    /// Adds a `[d]` vector to every row of a `[..., d]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = tx.cols();
        if tb.len() != d {
            return Err(shape_err("add_bias", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        self.push(t, Op::AddBias(x, bias), rg, "add_bias")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut c = vec![0.0; m * n];
        kernels::matmul_acc(ta.data(), tb.data(), &mut c, m, k, n);
        let t = Tensor::new(vec![m, n], c)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::MatMul(a, b), rg, "matmul")
    }

    /// `x · w + b` with `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::InvalidArgument("mean of empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg, "mean")
    }

    /// Softmax along the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let d = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            softmax_in_place(row);
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::SoftmaxRows(a), rg, "softmax")
    }

    /// Row-wise layer normalisation with affine gain and bias (biased variance).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if d == 0 || tg.len() != d || tb.len() != d {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let rows = tx.len() / d;
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
            "layer_norm",
        )
    }

    /// Fused multi-head scaled dot-product attention, fully bidirectional.
    ///
    /// `q`, `k`, `v` are `[batch*seq_len, d]`. Keys at positions `>= lens[b]`
    /// are padding and receive zero attention weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        meta: AttentionMeta,
        lens: &[usize],
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let AttentionMeta {
            batch,
            seq_len: l,
            n_heads,
        } = meta;
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(shape_err("attention", tq, tk));
        }
        if tq.rows() != batch * l || lens.len() != batch || n_heads == 0 || d % n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "attention: {} rows for batch {batch} x len {l}, {n_heads} heads over width {d}",
                tq.rows()
            )));
        }
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * n_heads * l * l];
        let mut out = vec![0.0; batch * l * d];
        for b in 0..batch {
            let valid = lens[b].min(l);
            for h in 0..n_heads {
                let pbase = (b * n_heads + h) * l * l;
                for i in 0..l {
                    let qi = &tq.data()[(b * l + i) * d + h * dh..(b * l + i) * d + (h + 1) * dh];
                    let prow = &mut probs[pbase + i * l..pbase + i * l + valid];
                    for (j, p) in prow.iter_mut().enumerate() {
                        let kj =
                            &tk.data()[(b * l + j) * d + h * dh..(b * l + j) * d + (h + 1) * dh];
                        *p = kernels::dot(qi, kj) * scale;
                    }
                    if valid > 0 {
                        softmax_in_place(prow);
                    }
                    let orow = &mut out[(b * l + i) * d + h * dh..(b * l + i) * d + (h + 1) * dh];
                    for (j, &p) in prow.iter().enumerate() {
                        let vj =
                            &tv.data()[(b * l + j) * d + h * dh..(b * l + j) * d + (h + 1) * dh];
                        for (o, &vv) in orow.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(tq.shape().to_vec(), out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                meta,
                lens: lens.to_vec(),
                probs,
            },
            rg,
            "attention",
        )
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let d = tt.cols();
        let n = tt.rows();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::InvalidArgument(format!(
                    "gather_rows: id {id} out of range for table of {n} rows"
                )));
            }
            data.extend_from_slice(tt.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(table);
        self.push(
            t,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
            "gather_rows",
        )
    }

    /// Mean over the first `lens[b]` rows of each `seq_len` block: `[B*L, d] -> [B, d]`.
    pub fn mean_pool(&mut self, x: Var, seq_len: usize, lens: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        if tx.rows() != lens.len() * seq_len {
            return Err(Error::InvalidArgument(format!(
                "mean_pool: {} rows for {} sequences of length {seq_len}",
                tx.rows(),
                lens.len()
            )));
        }
        let mut out = vec![0.0; lens.len() * d];
        for (b, &len) in lens.iter().enumerate() {
            if len == 0 || len > seq_len {
                return Err(Error::InvalidArgument(format!(
                    "mean_pool: sequence {b} has {len} valid positions"
                )));
            }
            let o = &mut out[b * d..(b + 1) * d];
            for i in 0..len {
                for (ov, &xv) in o.iter_mut().zip(tx.row(b * seq_len + i)) {
                    *ov += xv;
                }
            }
            o.iter_mut().for_each(|v| *v /= len as f64);
        }
        let t = Tensor::new(vec![lens.len(), d], out)?;
        let rg = self.rg(x);
        self.push(
            t,
            Op::MeanPool {
                x,
                seq_len,
                lens: lens.to_vec(),
            },
            rg,
            "mean_pool",
        )
    }

    /// Mean over rows with `mask[i]` of `-w[target_i] * log softmax(logits_i)[target_i]`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
        class_weights: Option<&[f64]>,
    ) -> Result<Var> {
        let tl = self.value(logits);
        let v = tl.cols();
        let n = tl.rows();
        if targets.len() != n || mask.len() != n {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::NoSupervisedPositions);
        }
        if let Some(w) = class_weights {
            if w.len() != v {
                return Err(Error::InvalidArgument(format!(
                    "{} class weights for {v} classes",
                    w.len()
                )));
            }
        }
        let mut probs = vec![0.0; n * v];
        let mut row_weights = vec![0.0; n];
        let mut total = 0.0;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let t = targets[i];
            if t >= v {
                return Err(Error::InvalidArgument(format!(
                    "target {t} outside [0, {v})"
                )));
            }
            let row = tl.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            let w = class_weights.map_or(1.0, |cw| cw[t]);
            row_weights[i] = w;
            total += w * (lse - row[t]);
            for (p, &x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let denom = count as f64;
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(total / denom),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                row_weights,
                probs,
                denom,
            },
            rg,
            "cross_entropy",
        )
    }

    /// Mean Huber loss over elements with `mask[i]`; `target` is a constant.
    pub fn huber(&mut self, pred: Var, target: &Tensor, delta: f64, mask: &[bool]) -> Result<Var> {
        let tp = self.value(pred);
        if tp.shape() != target.shape() || mask.len() != tp.len() {
            return Err(shape_err("huber", tp, target));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::NoSupervisedPositions);
        }
        let residual: Vec<f64> = tp
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| p - t)
            .collect();
        let mut total = 0.0;
        let mut margin = f64::INFINITY;
        let mut sig = 0u64;
        for (i, (&r, &m)) in residual.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            let a = r.abs();
            margin = margin.min((a - delta).abs());
            if a <= delta {
                total += 0.5 * r * r;
            } else {
                total += delta * (a - 0.5 * delta);
                sig = sig.wrapping_add((i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            }
        }
        self.note_branch(sig, margin);
        let denom = count as f64;
        let rg = self.rg(pred);
        self.push(
            Tensor::scalar(total / denom),
            Op::Huber {
                pred,
                residual,
                mask: mask.to_vec(),
                delta,
                denom,
            },
            rg,
            "huber",
        )
    }

    /// Forward value of `quantized`, gradient copied straight through to `x`.
    pub fn straight_through(&mut self, x: Var, quantized: Tensor) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != quantized.shape() {
            return Err(shape_err("straight_through", tx, &quantized));
        }
        let rg = self.rg(x);
        self.push(quantized, Op::StraightThrough(x), rg, "straight_through")
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} >= 1")));
        }
        let tx = self.value(x);
        let keep = 1.0 / (1.0 - rate);
        let keep_scale: Vec<f64> = (0..tx.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = tx
            .data()
            .iter()
            .zip(&keep_scale)
            .map(|(a, s)| a * s)
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push(t, Op::Dropout { x, keep_scale }, rg, "dropout")
    }

    fn conv_geom(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        transpose: bool,
    ) -> Result<Conv1dGeom> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let name = if transpose {
            "conv_transpose1d"
        } else {
            "conv1d"
        };
        if tx.shape().len() != 3 || tw.shape().len() != 3 || stride == 0 {
            return Err(shape_err(name, tx, tw));
        }
        let (batch, c_in, t_in) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (c_out, kernel) = if transpose {
            if tw.shape()[0] != c_in {
                return Err(shape_err(name, tx, tw));
            }
            (tw.shape()[1], tw.shape()[2])
        } else {
            if tw.shape()[1] != c_in {
                return Err(shape_err(name, tx, tw));
            }
            (tw.shape()[0], tw.shape()[2])
        };
        if tb.len() != c_out {
            return Err(shape_err(name, tw, tb));
        }
        let t_out = if transpose {
            ((t_in.max(1) - 1) * stride + kernel).checked_sub(2 * pad)
        } else {
            (t_in + 2 * pad).checked_sub(kernel).map(|v| v / stride + 1)
        };
        let t_out = t_out
            .filter(|&t| t > 0 && t_in > 0)
            .ok_or_else(|| shape_err(name, tx, tw))?;
        Ok(Conv1dGeom {
            batch,
            c_in,
            c_out,
            kernel,
            stride,
            pad,
            t_in,
            t_out,
        })
    }

    /// 1-D convolution over `[batch, channels, time]`, weight `[c_out, c_in, k]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = self.conv_geom(x, w, b, stride, pad, false)?;
        let y = kernels::conv1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let t = Tensor::new(vec![geom.batch, geom.c_out, geom.t_out], y)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(t, Op::Conv1d { x, w, b, geom }, rg, "conv1d")
    }

    /// Transposed 1-D convolution, weight `[c_in, c_out, k]`.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = self.conv_geom(x, w, b, stride, pad, true)?;
        let y = kernels::conv_transpose1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let t = Tensor::new(vec![geom.batch, geom.c_out, geom.t_out], y)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            t,
            Op::ConvTranspose1d { x, w, b, geom },
            rg,
            "conv_transpose1d",
        )
    }

    /// `[B, C, T] -> [B*T, C]`
    pub fn channels_last(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let &[batch, channels, time] = tx.shape() else {
            return Err(Error::InvalidArgument(format!(
                "channels_last expects [B, C, T], got {:?}",
                tx.shape()
            )));
        };
        let mut data = vec![0.0; tx.len()];
        for b in 0..batch {
            for c in 0..channels {
                for t in 0..time {
                    data[(b * time + t) * channels + c] = tx.data()[(b * channels + c) * time + t];
                }
            }
        }
        let t = Tensor::new(vec![batch * time, channels], data)?;
        let rg = self.rg(x);
        self.push(
            t,
            Op::ChannelsLast {
                x,
                batch,
                channels,
                time,
            },
            rg,
            "channels_last",
        )
    }

    /// `[B*T, C] -> [B, C, T]`
    pub fn channels_first(&mut self, x: Var, batch: usize) -> Result<Var> {
        let tx = self.value(x);
        let channels = tx.cols();
        if batch == 0 || tx.rows() % batch != 0 {
            return Err(Error::InvalidArgument(format!(
                "channels_first: {} rows not divisible by batch {batch}",
                tx.rows()
            )));
        }
        let time = tx.rows() / batch;
        let mut data = vec![0.0; tx.len()];
        for b in 0..batch {
            for c in 0..channels {
                for t in 0..time {
                    data[(b * channels + c) * time + t] = tx.data()[(b * time + t) * channels + c];
                }
            }
        }
        let t = Tensor::new(vec![batch, channels, time], data)?;
        let rg = self.rg(x);
        self.push(
            t,
            Op::ChannelsFirst {
                x,
                batch,
                channels,
                time,
            },
            rg,
            "channels_first",
        )
    }

    /// Time window `[start, start+len)` of a `[B, C, T]` tensor.
    pub fn slice_time(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let &[batch, channels, time_in] = tx.shape() else {
            return Err(Error::InvalidArgument(
                "slice_time expects [B, C, T]".into(),
            ));
        };
        if start + len > time_in {
            return Err(Error::InvalidArgument(format!(
                "slice_time: [{start}, {}) outside length {time_in}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(batch * channels * len);
        for row in tx.data().chunks(time_in) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let t = Tensor::new(vec![batch, channels, len], data)?;
        let rg = self.rg(x);
        self.push(t, Op::SliceTime { x, start, time_in }, rg, "slice_time")
    }

    /// Reverse-mode sweep from a scalar loss. A tape supports exactly one sweep.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward already ran on this tape; record a new graph".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward plus accumulation into the parameter store's gradient buffers.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        store.begin_accumulate()?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                for (dst, src) in store.grad_mut(*id).iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
        Ok(grads)
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |s| {
                    for ((d, g), y) in s.iter_mut().zip(g).zip(vb) {
                        *d += g * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((d, g), x) in s.iter_mut().zip(g).zip(va) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| {
                s.iter_mut().zip(g).for_each(|(d, g)| *d += g * c)
            }),
            Op::Square(a) => {
                let va = nodes[a.0].value.data();
                acc(*a, &mut |s| {
                    for ((d, g), x) in s.iter_mut().zip(g).zip(va) {
                        *d += 2.0 * x * g;
                    }
                });
            }
            Op::Gelu(a) => {
                let va = nodes[a.0].value.data();
                acc(*a, &mut |s| {
                    for ((d, g), &x) in s.iter_mut().zip(g).zip(va) {
                        *d += g * gelu_grad(x);
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                let dcols = nodes[b.0].value.len();
                acc(*b, &mut |s| {
                    for row in g.chunks(dcols) {
                        s.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc(*a, &mut |s| {
                    kernels::matmul_nt_acc(g, tb.data(), s, m, n, k)
                });
                acc(*b, &mut |s| {
                    kernels::matmul_tn_acc(ta.data(), g, s, m, k, n)
                });
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let d = node.value.cols().max(1);
                acc(*a, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let dotp = kernels::dot(grow, yrow);
                        for ((sv, gv), yv) in srow.iter_mut().zip(grow).zip(yrow) {
                            *sv += yv * (gv - dotp);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = nodes[gain.0].value.data();
                let d = gv.len();
                acc(*x, &mut |s| {
                    let mut dxhat = vec![0.0; d];
                    for (r, rs) in rstd.iter().enumerate() {
                        let grow = &g[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = grow[j] * gv[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = kernels::dot(&dxhat, hrow) / d as f64;
                        for j in 0..d {
                            s[r * d + j] += rs * (dxhat[j] - m1 - hrow[j] * m2);
                        }
                    }
                });
                acc(*gain, &mut |s| {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            s[j] += grow[j] * hrow[j];
                        }
                    }
                });
                acc(*bias, &mut |s| {
                    for grow in g.chunks(d) {
                        s.iter_mut().zip(grow).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                meta,
                lens,
                probs,
            } => {
                self.attention_backward(g, *q, *k, *v, meta, lens, probs, grads);
            }
            Op::GatherRows { table, ids } => {
                let d = nodes[table.0].value.cols();
                acc(*table, &mut |s| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            s[id * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::MeanPool { x, seq_len, lens } => {
                let d = node.value.cols();
                acc(*x, &mut |s| {
                    for (b, &len) in lens.iter().enumerate() {
                        for i in 0..len {
                            let base = (b * seq_len + i) * d;
                            for j in 0..d {
                                s[base + j] += g[b * d + j] / len as f64;
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                row_weights,
                probs,
                denom,
            } => {
                let v = nodes[logits.0].value.cols();
                acc(*logits, &mut |s| {
                    for (r, &w) in row_weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let c = g[0] * w / denom;
                        for j in 0..v {
                            s[r * v + j] += c * probs[r * v + j];
                        }
                        s[r * v + targets[r]] -= c;
                    }
                });
            }
            Op::Huber {
                pred,
                residual,
                mask,
                delta,
                denom,
            } => {
                acc(*pred, &mut |s| {
                    for ((d, &r), &m) in s.iter_mut().zip(residual).zip(mask) {
                        if m {
                            *d += g[0] * r.clamp(-delta, *delta) / denom;
                        }
                    }
                });
            }
            Op::StraightThrough(x) => {
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(d, g)| *d += g))
            }
            Op::Dropout { x, keep_scale } => acc(*x, &mut |s| {
                for ((d, g), k) in s.iter_mut().zip(g).zip(keep_scale) {
                    *d += g * k;
                }
            }),
            Op::Conv1d { x, w, b, geom } => {
                self.conv_backward(g, *x, *w, *b, geom, false, grads);
            }
            Op::ConvTranspose1d { x, w, b, geom } => {
                self.conv_backward(g, *x, *w, *b, geom, true, grads);
            }
            Op::ChannelsLast {
                x,
                batch,
                channels,
                time,
            } => acc(*x, &mut |s| {
                for b in 0..*batch {
                    for c in 0..*channels {
                        for t in 0..*time {
                            s[(b * channels + c) * time + t] += g[(b * time + t) * channels + c];
                        }
                    }
                }
            }),
            Op::ChannelsFirst {
                x,
                batch,
                channels,
                time,
            } => acc(*x, &mut |s| {
                for b in 0..*batch {
                    for c in 0..*channels {
                        for t in 0..*time {
                            s[(b * time + t) * channels + c] += g[(b * channels + c) * time + t];
                        }
                    }
                }
            }),
            Op::SliceTime { x, start, time_in } => {
                let len = node.value.shape()[2];
                acc(*x, &mut |s| {
                    for (srow, grow) in s.chunks_mut(*time_in).zip(g.chunks(len)) {
                        for (d, gv) in srow[*start..*start + len].iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        g: &[f64],
        x: Var,
        w: Var,
        b: Var,
        geom: &Conv1dGeom,
        transpose: bool,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let nodes = &self.nodes;
        let take = |grads: &mut [Option<Vec<f64>>], v: Var| -> Option<Vec<f64>> {
            nodes[v.0].requires_grad.then(|| {
                grads[v.0]
                    .take()
                    .unwrap_or_else(|| vec![0.0; nodes[v.0].value.len()])
            })
        };
        let mut dx = take(grads, x);
        let mut dw = take(grads, w);
        let mut db = take(grads, b);
        let (xv, wv) = (nodes[x.0].value.data(), nodes[w.0].value.data());
        if transpose {
            kernels::conv_transpose1d_backward(
                xv,
                wv,
                g,
                geom,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
        } else {
            kernels::conv1d_backward(
                xv,
                wv,
                g,
                geom,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
        }
        for (v, d) in [(x, dx), (w, dw), (b, db)] {
            if d.is_some() {
                grads[v.0] = d;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        meta: &AttentionMeta,
        lens: &[usize],
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let nodes = &self.nodes;
        let (tq, tk, tv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
        let d = tq.cols();
        let AttentionMeta {
            batch,
            seq_len: l,
            n_heads,
        } = *meta;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; tq.len()];
        let mut dk = vec![0.0; tk.len()];
        let mut dv = vec![0.0; tv.len()];
        let mut dp = vec![0.0; l];
        for b in 0..batch {
            let valid = lens[b].min(l);
            for h in 0..n_heads {
                let pbase = (b * n_heads + h) * l * l;
                let col = |r: usize| (b * l + r) * d + h * dh;
                for i in 0..l {
                    let prow = &probs[pbase + i * l..pbase + i * l + valid];
                    let gi = &g[col(i)..col(i) + dh];
                    // dV_j += P_ij * dO_i ; dP_ij = dO_i . V_j
                    for j in 0..valid {
                        let vj = &tv.data()[col(j)..col(j) + dh];
                        dp[j] = kernels::dot(gi, vj);
                        let p = prow[j];
                        for (dvv, gv) in dv[col(j)..col(j) + dh].iter_mut().zip(gi) {
                            *dvv += p * gv;
                        }
                    }
                    let inner = kernels::dot(&dp[..valid], prow);
                    for j in 0..valid {
                        let ds = prow[j] * (dp[j] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let (qi_start, kj_start) = (col(i), col(j));
                        for c in 0..dh {
                            dq[qi_start + c] += ds * tk.data()[kj_start + c];
                            dk[kj_start + c] += ds * tq.data()[qi_start + c];
                        }
                    }
                }
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if !nodes[var.0].requires_grad {
                continue;
            }
            match &mut grads[var.0] {
                Some(slot) => slot.iter_mut().zip(&d).for_each(|(s, x)| *s += x),
                None => grads[var.0] = Some(d),
            }
        }
    }
}
