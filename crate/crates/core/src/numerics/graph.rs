//! Define-by-run reverse-mode differentiation.
//!
//! Every op computes its value eagerly and appends a node to the tape.
//! `backward` walks the tape in reverse and accumulates gradients. All
//! matrices are row-major; vectors act as a single row.

use rand::Rng;

use super::params::ParamStore;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Epsilon added to the variance inside `layer_norm`.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gather {
        src: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Gelu(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        denom: f64,
        probs: Vec<f64>,
    },
    Bce {
        logits: Var,
        targets: Vec<f64>,
        denom: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A computation tape. Rebuilt for every forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients of one scalar with respect to every node of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
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

/// Row-wise softmax outside any graph.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let (_, cols) = t.dims2();
    if cols > 0 {
        out.data_mut().chunks_mut(cols).for_each(softmax_in_place);
    }
    out
}

/// Numerically stable `log(1 + exp(x))`.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant input; receives a gradient but belongs to no parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Registers parameter `idx` of `store` (once per graph).
    pub fn param(&mut self, store: &ParamStore, idx: usize) -> Var {
        if self.param_vars.len() <= idx {
            self.param_vars.resize(idx + 1, None);
        }
        if let Some(v) = self.param_vars[idx] {
            return v;
        }
        let v = self.push(store.get(idx).value.clone(), Op::Param);
        self.param_vars[idx] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(shape_err("transpose", ta, ta));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ta.data()[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        Ok(self.push(t, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    /// Adds a row vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (_, cols) = tx.dims2();
        if tb.numel() != cols {
            return Err(shape_err("add_row", tx, tb));
        }
        let mut out = tx.clone();
        if cols > 0 {
            for row in out.data_mut().chunks_mut(cols) {
                for (o, bv) in row.iter_mut().zip(tb.data()) {
                    *o += bv;
                }
            }
        }
        Ok(self.push(out, Op::AddRow(x, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("multiply", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|v| *v *= s);
        self.push(t, Op::Scale(a, s))
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    /// Selects rows of `table` (an embedding lookup, or a row gather of
    /// any activation matrix).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(shape_err("embedding_lookup", tt, tt));
        }
        let (rows, cols) = (tt.shape()[0], tt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Shape {
                    op: "embedding_lookup",
                    lhs: tt.shape().to_vec(),
                    rhs: vec![id],
                });
            }
            out.extend_from_slice(&tt.data()[id * cols..(id + 1) * cols]);
        }
        let t = Tensor::new(vec![ids.len(), cols], out)?;
        Ok(self.push(
            t,
            Op::Gather {
                src: table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Per-row normalization followed by the affine map `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, cols) = tx.dims2();
        if tg.numel() != cols || tb.numel() != cols {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &tx.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = softmax_rows(self.value(x));
        self.push(t, Op::Softmax(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = gelu_parts(*v).0);
        self.push(t, Op::Gelu(x))
    }

    /// Inverted dropout; the identity when `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let shape = self.value(x).shape().to_vec();
        let numel = self.value(x).numel();
        let mask = (0..numel)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.input(Tensor::new(shape, mask)?);
        self.mul(x, m)
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| crate::error::invalid("concat", "no inputs"))?);
        if first.rank() != 2 || axis > 1 {
            return Err(shape_err("concat", first, first));
        }
        let (r0, c0) = (first.shape()[0], first.shape()[1]);
        for p in parts {
            let t = self.value(*p);
            let ok = t.rank() == 2 && if axis == 0 { t.shape()[1] == c0 } else { t.shape()[0] == r0 };
            if !ok {
                return Err(shape_err("concat", first, t));
            }
        }
        let out = if axis == 0 {
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let t = self.value(*p);
                rows += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            Tensor::new(vec![rows, c0], data)?
        } else {
            let cols: usize = parts.iter().map(|p| self.value(*p).shape()[1]).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for p in parts {
                    data.extend_from_slice(self.value(*p).row(r));
                }
            }
            Tensor::new(vec![r0, cols], data)?
        };
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Range `start..end` along `axis` of a 2-D tensor.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || axis > 1 || start > end || end > t.shape()[axis] {
            return Err(Error::Shape {
                op: "slice",
                lhs: t.shape().to_vec(),
                rhs: vec![axis, start, end],
            });
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let out = if axis == 0 {
            Tensor::new(vec![end - start, cols], t.data()[start * cols..end * cols].to_vec())?
        } else {
            let mut data = Vec::with_capacity(rows * (end - start));
            for r in 0..rows {
                data.extend_from_slice(&t.row(r)[start..end]);
            }
            Tensor::new(vec![rows, end - start], data)?
        };
        Ok(self.push(out, Op::Slice { x, axis, start }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Multi-head self-attention over `rows / seq` independent sequences.
    /// `q`, `k`, `v` are `[batch·seq, dim]`; heads split the columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() || tq.rank() != 2 {
            return Err(shape_err("attention", tq, tk));
        }
        let (rows, dim) = (tq.shape()[0], tq.shape()[1]);
        if seq == 0 || heads == 0 || rows % seq != 0 || dim % heads != 0 {
            return Err(Error::Shape {
                op: "attention",
                lhs: tq.shape().to_vec(),
                rhs: vec![seq, heads],
            });
        }
        let batch = rows / seq;
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * dim];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                let col = h * dh;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * dim + col..(b * seq + i) * dim + col + dh];
                    let prow = &mut p[i * seq..(i + 1) * seq];
                    for j in 0..seq {
                        let kj = &kd[(b * seq + j) * dim + col..(b * seq + j) * dim + col + dh];
                        prow[j] = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[(b * seq + i) * dim + col..(b * seq + i) * dim + col + dh];
                    for j in 0..seq {
                        let w = prow[j];
                        let vj = &vd[(b * seq + j) * dim + col..(b * seq + j) * dim + col + dh];
                        for (o, vv) in orow.iter_mut().zip(vj) {
                            *o += w * vv;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![rows, dim], out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            },
        ))
    }

    /// Weighted mean negative log-softmax probability of `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let denom: f64 = weights.iter().sum();
        self.cross_entropy_with_denominator(logits, targets, weights, denom)
    }

    /// As [`Graph::cross_entropy`] but dividing by a caller-supplied
    /// denominator, so a batch split into shards sums to the full-batch loss.
    pub fn cross_entropy_with_denominator(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
        denom: f64,
    ) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, k) = tl.dims2();
        if tl.rank() != 2 || targets.len() != rows || weights.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len(), weights.len()],
            });
        }
        if denom <= 0.0 || weights.iter().all(|&w| w == 0.0) {
            return Err(Error::NoSupervision);
        }
        let probs = softmax_rows(tl).into_data();
        let mut loss = 0.0;
        for r in 0..rows {
            if weights[r] == 0.0 {
                continue;
            }
            if targets[r] >= k {
                return Err(crate::error::invalid(
                    "target",
                    format!("index {} outside codebook of size {k}", targets[r]),
                ));
            }
            let row = tl.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += weights[r] * (lse - row[targets[r]]);
        }
        Ok(self.push(
            Tensor::scalar(loss / denom),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                denom,
                probs,
            },
        ))
    }

    /// Mean binary cross-entropy with logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let denom = targets.len() as f64;
        self.bce_with_logits_with_denominator(logits, targets, denom)
    }

    pub fn bce_with_logits_with_denominator(&mut self, logits: Var, targets: &[f64], denom: f64) -> Result<Var> {
        let tl = self.value(logits);
        if tl.numel() != targets.len() || targets.is_empty() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(bad) = targets.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(crate::error::invalid("bce target", format!("{bad} is not 0 or 1")));
        }
        let loss: f64 = tl
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| softplus(x) - x * y)
            .sum();
        Ok(self.push(
            Tensor::scalar(loss / denom),
            Op::Bce {
                logits,
                targets: targets.to_vec(),
                denom,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lt.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of every registered parameter, indexed like the store.
    pub fn param_grads(&self, grads: &Gradients, n_params: usize) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = (0..n_params).map(|_| None).collect();
        for (idx, var) in self.param_vars.iter().enumerate() {
            if let (Some(v), true) = (var, idx < n_params) {
                out[idx] = grads.get(*v).cloned();
            }
        }
        out
    }

    /// Adds this graph's parameter gradients into `store`.
    pub fn accumulate_into(&self, grads: &Gradients, store: &mut ParamStore) {
        for (idx, var) in self.param_vars.iter().enumerate() {
            if let Some(g) = var.and_then(|v| grads.get(v)) {
                store.accumulate(idx, g);
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, delta: Tensor| match &mut grads[v.0] {
            Some(t) => t.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, tb.data(), true, &mut da, 0.0);
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, ta.data(), true, g.data(), false, &mut db, 0.0);
                acc(*a, Tensor::new(vec![m, k], da).unwrap());
                acc(*b, Tensor::new(vec![k, n], db).unwrap());
            }
            Op::Transpose(a) => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let mut out = vec![0.0; r * c];
                for x in 0..r {
                    for y in 0..c {
                        out[y * r + x] = g.data()[x * c + y];
                    }
                }
                acc(*a, Tensor::new(vec![c, r], out).unwrap());
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(x, b) => {
                acc(*x, g.clone());
                let tb = self.value(*b);
                let cols = tb.numel();
                let mut db = vec![0.0; cols];
                if cols > 0 {
                    for row in g.data().chunks(cols) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                acc(*b, Tensor::new(tb.shape().to_vec(), db).unwrap());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                let db = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                acc(*a, Tensor::new(ta.shape().to_vec(), da).unwrap());
                acc(*b, Tensor::new(tb.shape().to_vec(), db).unwrap());
            }
            Op::Scale(a, s) => {
                let mut d = g.clone();
                d.data_mut().iter_mut().for_each(|v| *v *= s);
                acc(*a, d);
            }
            Op::Gather { src, ids } => {
                let ts = self.value(*src);
                let cols = ts.shape()[1];
                let mut d = Tensor::zeros(ts.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut d.data_mut()[id * cols..(id + 1) * cols];
                    for (o, v) in dst.iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]) {
                        *o += v;
                    }
                }
                acc(*src, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let tx = self.value(*x);
                let tg = self.value(*gamma);
                let (rows, cols) = tx.dims2();
                let mut dx = vec![0.0; rows * cols];
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let hr = &xhat[r * cols..(r + 1) * cols];
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for c in 0..cols {
                        dgamma[c] += gr[c] * hr[c];
                        dbeta[c] += gr[c];
                        dxhat[c] = gr[c] * tg.data()[c];
                        s1 += dxhat[c];
                        s2 += dxhat[c] * hr[c];
                    }
                    let n = cols as f64;
                    for c in 0..cols {
                        dx[r * cols + c] = inv_std[r] / n * (n * dxhat[c] - s1 - hr[c] * s2);
                    }
                }
                acc(*x, Tensor::new(tx.shape().to_vec(), dx).unwrap());
                acc(*gamma, Tensor::new(tg.shape().to_vec(), dgamma).unwrap());
                let tb = self.value(*beta);
                acc(*beta, Tensor::new(tb.shape().to_vec(), dbeta).unwrap());
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let (_, cols) = y.dims2();
                let mut d = vec![0.0; y.numel()];
                for ((dr, yr), gr) in d.chunks_mut(cols).zip(y.data().chunks(cols)).zip(g.data().chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        dr[c] = yr[c] * (gr[c] - dot);
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let d = tx.data().iter().zip(g.data()).map(|(&v, gv)| gelu_parts(v).1 * gv).collect();
                acc(*x, Tensor::new(tx.shape().to_vec(), d).unwrap());
            }
            Op::Concat { parts, axis } => {
                let (rows, cols) = (g.shape()[0], g.shape()[1]);
                let mut offset = 0;
                for p in parts {
                    let tp = self.value(*p);
                    let (pr, pc) = (tp.shape()[0], tp.shape()[1]);
                    let d = if *axis == 0 {
                        g.data()[offset * cols..(offset + pr) * cols].to_vec()
                    } else {
                        let mut d = Vec::with_capacity(pr * pc);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * cols + offset..r * cols + offset + pc]);
                        }
                        d
                    };
                    offset += if *axis == 0 { pr } else { pc };
                    acc(*p, Tensor::new(vec![pr, pc], d).unwrap());
                }
            }
            Op::Slice { x, axis, start } => {
                let tx = self.value(*x);
                let (rows, cols) = (tx.shape()[0], tx.shape()[1]);
                let mut d = Tensor::zeros(tx.shape());
                if *axis == 0 {
                    d.data_mut()[start * cols..start * cols + g.numel()].copy_from_slice(g.data());
                } else {
                    let w = g.shape()[1];
                    for r in 0..rows {
                        d.data_mut()[r * cols + start..r * cols + start + w].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                    }
                }
                acc(*x, d);
            }
            Op::Sum(x) => {
                let tx = self.value(*x);
                acc(*x, Tensor::filled(tx.shape(), g.data()[0]));
            }
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (rows, dim) = (tq.shape()[0], tq.shape()[1]);
                let (seq, heads) = (*seq, *heads);
                let batch = rows / seq;
                let dh = dim / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; rows * dim];
                let mut dk = vec![0.0; rows * dim];
                let mut dv = vec![0.0; rows * dim];
                let mut dp = vec![0.0; seq];
                let (qd, kd, vd, gd) = (tq.data(), tk.data(), tv.data(), g.data());
                let at = |b: usize, i: usize, h: usize| (b * seq + i) * dim + h * dh;
                for b in 0..batch {
                    for h in 0..heads {
                        let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                        for i in 0..seq {
                            let gi = &gd[at(b, i, h)..at(b, i, h) + dh];
                            let prow = &p[i * seq..(i + 1) * seq];
                            for j in 0..seq {
                                let vj = &vd[at(b, j, h)..at(b, j, h) + dh];
                                dp[j] = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                                let dvj = &mut dv[at(b, j, h)..at(b, j, h) + dh];
                                for (o, gv) in dvj.iter_mut().zip(gi) {
                                    *o += prow[j] * gv;
                                }
                            }
                            let dot: f64 = prow.iter().zip(&dp).map(|(x, y)| x * y).sum();
                            for j in 0..seq {
                                let ds = prow[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for c in 0..dh {
                                    dq[at(b, i, h) + c] += ds * kd[at(b, j, h) + c];
                                    dk[at(b, j, h) + c] += ds * qd[at(b, i, h) + c];
                                }
                            }
                        }
                    }
                }
                let shape = tq.shape().to_vec();
                acc(*q, Tensor::new(shape.clone(), dq).unwrap());
                acc(*k, Tensor::new(shape.clone(), dk).unwrap());
                acc(*v, Tensor::new(shape, dv).unwrap());
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                denom,
                probs,
            } => {
                let tl = self.value(*logits);
                let (_, k) = tl.dims2();
                let mut d = vec![0.0; tl.numel()];
                let scale = g.data()[0] / denom;
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    for c in 0..k {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        d[r * k + c] = scale * w * (probs[r * k + c] - onehot);
                    }
                }
                acc(*logits, Tensor::new(tl.shape().to_vec(), d).unwrap());
            }
            Op::Bce { logits, targets, denom } => {
                let tl = self.value(*logits);
                let scale = g.data()[0] / denom;
                let d = tl.data().iter().zip(targets).map(|(&x, &y)| scale * (sigmoid(x) - y)).collect();
                acc(*logits, Tensor::new(tl.shape().to_vec(), d).unwrap());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn scalar_matmul() {
        let mut g = Graph::new();
        let a = g.input(t2(1, 1, &[2.0]));
        let b = g.input(t2(1, 1, &[3.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut g = Graph::new();
        let a = g.input(t2(2, 3, &[0.0; 6]));
        let b = g.input(t2(2, 3, &[0.0; 6]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let a = g.input(t2(1, 2, &[0.0, 0.0]));
        let s = g.softmax(a);
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.input(t2(1, 4, &[3.0; 4]));
        let gamma = g.input(Tensor::filled(&[4], 1.0));
        let beta = g.input(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_cross_entropy_is_ln_k() {
        let mut g = Graph::new();
        let l = g.input(t2(1, 5, &[0.0; 5]));
        let loss = g.cross_entropy(l, &[3], &[1.0]).unwrap();
        assert!((g.value(loss).data()[0] - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn favoured_target_beats_uniform() {
        let mut g = Graph::new();
        let l = g.input(t2(1, 5, &[0.0, 0.0, 2.0, 0.0, 0.0]));
        let loss = g.cross_entropy(l, &[2], &[1.0]).unwrap();
        assert!(g.value(loss).data()[0] < 5f64.ln());
    }

    #[test]
    fn zero_weight_position_is_ignored() {
        let mut g = Graph::new();
        let l = g.input(t2(2, 3, &[1.0, 0.5, -1.0, 9.0, -3.0, 0.0]));
        let both = g.cross_entropy(l, &[0, 1], &[1.0, 0.0]).unwrap();
        let first = g.slice(l, 0, 0, 1).unwrap();
        let single = g.cross_entropy(first, &[0], &[1.0]).unwrap();
        assert_eq!(g.value(both).data(), g.value(single).data());
    }

    #[test]
    fn all_zero_weights_rejected() {
        let mut g = Graph::new();
        let l = g.input(t2(2, 3, &[0.0; 6]));
        let err = g.cross_entropy(l, &[0, 1], &[0.0, 0.0]).unwrap_err();
        assert_eq!(err.to_string(), "no supervised positions");
    }

    #[test]
    fn bce_values() {
        let mut g = Graph::new();
        let l = g.input(Tensor::new(vec![1], vec![0.0]).unwrap());
        let b = g.bce_with_logits(l, &[1.0]).unwrap();
        assert!((g.value(b).data()[0] - 2f64.ln()).abs() < 1e-12);

        let l = g.input(Tensor::new(vec![1], vec![20.0]).unwrap());
        let b = g.bce_with_logits(l, &[1.0]).unwrap();
        let v = g.value(b).data()[0];
        assert!((v - 2.061_153_6e-9).abs() < 1e-15, "{v}");

        let l = g.input(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let b = g.bce_with_logits(l, &[1.0, 0.0]).unwrap();
        assert!((g.value(b).data()[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut store = ParamStore::new();
        let idx = store.add("p", t2(2, 2, &[1.0, -2.0, 3.0, 0.5])).unwrap();
        let mut g = Graph::new();
        let p = g.param(&store, idx);
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0; 4]);

        let mut g = Graph::new();
        let p = g.param(&store, idx);
        let sq = g.mul(p, p).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[2.0, -4.0, 6.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let a = g.input(t2(1, 2, &[1.0, 2.0]));
        assert!(matches!(g.backward(a), Err(Error::NotScalar(_))));
    }
}
