//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every op in creation order, which is already a valid
//! topological order: an op can only consume vars that exist when it is
//! created. Leaves borrow their data from caller-owned [`Tensor`]s, so binding
//! a frozen backbone to a fresh graph per example costs nothing.
//!
//! Gradients are only computed along paths that reach a leaf with
//! `requires_grad`; frozen leaves never get a buffer.

use std::borrow::Cow;

use super::tensor::Tensor;
use super::kernels::{self, gemm};
use crate::error::{DfrError, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: f64,
    },
    Gelu {
        x: Var,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Rope {
        x: Var,
        cos: Vec<f64>,
        sin: Vec<f64>,
        n_heads: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        probs: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    Reshape {
        x: Var,
    },
    MeanRows {
        x: Var,
    },
    Sum {
        x: Var,
    },
    SoftmaxXent {
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    MaskedLogSoftmax {
        x: Var,
        allowed: Vec<bool>,
        probs: Vec<f64>,
    },
    WeightedSum {
        x: Var,
        w: Vec<f64>,
    },
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf var.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any) into `t.grad`.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) {
        if let Some(g) = self.get(v) {
            t.accumulate_grad(g);
        }
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> DfrError {
    DfrError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Interprets a 1-D shape as a single row.
fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [n] => Some((1, *n)),
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if value.iter().any(|x| !x.is_finite()) {
            return Err(DfrError::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(shape, Cow::Owned(value), op, needs_grad))
    }

    /// Binds a caller-owned tensor as a leaf; it receives a gradient iff
    /// `t.requires_grad`.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Leaf, t.requires_grad)
    }

    /// Owned leaf.
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.input(t, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// `x Wᵀ + b` for `x: [*, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (m, k) = as_matrix(&xs).ok_or_else(|| shape_err("linear", &xs, &ws))?;
        if ws.len() != 2 || ws[1] != k {
            return Err(shape_err("linear", &xs, &ws));
        }
        let n = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(shape_err("linear", &ws, self.shape(b)));
            }
        }
        let mut y = vec![0.0; m * n];
        gemm(m, k, n, self.value(x), k, 1, self.value(w), 1, k, &mut y, n, 0.0);
        if let Some(b) = b {
            let bv = self.value(b);
            for row in y.chunks_mut(n.max(1)) {
                row.iter_mut().zip(bv).for_each(|(a, c)| *a += c);
            }
        }
        let shape = if xs.len() == 1 { vec![n] } else { vec![m, n] };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push_op("linear", shape, y, Op::Linear { x, w, b }, &inputs)
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
            return Err(shape_err("matmul", &as_, &bs));
        }
        let (m, k, n) = (as_[0], as_[1], bs[1]);
        let mut y = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), k, 1, self.value(b), n, 1, &mut y, n, 0.0);
        self.push_op("matmul", vec![m, n], y, Op::MatMul { a, b }, &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (r, c) = match s.as_slice() {
            [r, c] => (*r, *c),
            _ => return Err(shape_err("transpose", &s, &[])),
        };
        let v = kernels::transpose(self.value(x), r, c);
        self.push_op("transpose", vec![c, r], v, Op::Transpose { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let v: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push_op("add", self.shape(a).to_vec(), v, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let v: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push_op("mul", self.shape(a).to_vec(), v, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let v: Vec<f64> = self.value(x).iter().map(|a| a * s).collect();
        self.push_op("scale", self.shape(x).to_vec(), v, Op::Scale { x, s }, &[x])
    }

    /// Exact GELU, `x Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v: Vec<f64> = self.value(x).iter().map(|&a| kernels::gelu(a)).collect();
        self.push_op("gelu", self.shape(x).to_vec(), v, Op::Gelu { x }, &[x])
    }

    /// Root-mean-square normalization over the last axis with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (rows, d) = as_matrix(&xs).ok_or_else(|| shape_err("rms_norm", &xs, &[]))?;
        if self.shape(gain) != [d] {
            return Err(shape_err("rms_norm", &xs, self.shape(gain)));
        }
        let xv = self.value(x);
        let g = self.value(gain);
        let mut out = vec![0.0; rows * d];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let ms = row.iter().map(|a| a * a).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for j in 0..d {
                out[r * d + j] = row[j] * inv * g[j];
            }
        }
        self.push_op("rms_norm", xs, out, Op::RmsNorm { x, gain, inv_rms }, &[x, gain])
    }

    /// Rotary position embedding applied per head on interleaved pairs
    /// `(2i, 2i+1)` with frequency `base^(-2i/head_dim)`.
    pub fn rope(&mut self, x: Var, position_ids: &[usize], n_heads: usize, base: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (t, d) = match xs.as_slice() {
            [t, d] => (*t, *d),
            _ => return Err(shape_err("rope", &xs, &[])),
        };
        if n_heads == 0 || d % n_heads != 0 {
            return Err(DfrError::invalid(format!("rope: width {d} not divisible by {n_heads} heads")));
        }
        let hd = d / n_heads;
        if !hd.is_multiple_of(2) {
            return Err(DfrError::invalid(format!("rope: head dimension {hd} is odd")));
        }
        if position_ids.len() != t {
            return Err(shape_err("rope", &xs, &[position_ids.len()]));
        }
        let half = hd / 2;
        let mut cos = Vec::with_capacity(t * half);
        let mut sin = Vec::with_capacity(t * half);
        for &p in position_ids {
            for i in 0..half {
                let theta = p as f64 * base.powf(-2.0 * i as f64 / hd as f64);
                cos.push(theta.cos());
                sin.push(theta.sin());
            }
        }
        let out = kernels::rotate_pairs(self.value(x), t, n_heads, hd, &cos, &sin, false);
        self.push_op("rope", xs, out, Op::Rope { x, cos, sin, n_heads }, &[x])
    }

    /// Multi-head causal scaled dot-product attention on `[T, H*hd]` inputs.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        if self.shape(k) != qs.as_slice() || self.shape(v) != qs.as_slice() || qs.len() != 2 {
            return Err(shape_err("causal_attention", &qs, self.shape(k)));
        }
        let (t, d) = (qs[0], qs[1]);
        if n_heads == 0 || d % n_heads != 0 {
            return Err(DfrError::invalid(format!("attention: width {d} not divisible by {n_heads} heads")));
        }
        let (out, probs) = kernels::attention_forward(self.value(q), self.value(k), self.value(v), t, d, n_heads);
        self.push_op("causal_attention", qs, out, Op::Attention { q, k, v, n_heads, probs }, &[q, k, v])
    }

    /// Row lookup `table[ids[t]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(shape_err("gather_rows", &ts, &[]));
        }
        let (rows, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(DfrError::invalid(format!("token id {bad} out of range for {rows} rows")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        self.push_op("gather_rows", vec![ids.len(), d], out, Op::Gather { table, ids: ids.to_vec() }, &[table])
    }

    /// Stacks `[r_i, d]` (or `[d]`) parts along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut d = None;
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            let (r, c) = as_matrix(s).ok_or_else(|| shape_err("concat_rows", s, &[]))?;
            match d {
                None => d = Some(c),
                Some(dd) if dd != c => return Err(shape_err("concat_rows", &[dd], &[c])),
                _ => {}
            }
            rows += r;
        }
        let d = d.ok_or_else(|| DfrError::invalid("concat_rows of nothing"))?;
        let mut out = Vec::with_capacity(rows * d);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        self.push_op("concat_rows", vec![rows, d], out, Op::ConcatRows { parts: parts.to_vec() }, parts)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let v = self.value(x).to_vec();
        self.push_op("reshape", shape.to_vec(), v, Op::Reshape { x }, &[x])
    }

    /// Mean over the rows of `[n, d]`, giving `[d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (n, d) = match s.as_slice() {
            [n, d] if *n > 0 => (*n, *d),
            _ => return Err(shape_err("mean_rows", &s, &[])),
        };
        let xv = self.value(x);
        let mut out = vec![0.0; d];
        for r in 0..n {
            out.iter_mut().zip(&xv[r * d..(r + 1) * d]).for_each(|(o, a)| *o += a);
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        self.push_op("mean_rows", vec![d], out, Op::MeanRows { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).iter().sum();
        self.push_op("sum", vec![1], vec![s], Op::Sum { x }, &[x])
    }

    /// Mean over masked rows of `-log softmax(logits)[target]`.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        let (t, vocab) = as_matrix(&ls).ok_or_else(|| shape_err("softmax_xent", &ls, &[]))?;
        if targets.len() != t || mask.len() != t {
            return Err(shape_err("softmax_xent", &ls, &[targets.len(), mask.len()]));
        }
        let rows: Vec<usize> = (0..t).filter(|&i| mask[i]).collect();
        if rows.is_empty() {
            return Err(DfrError::EmptyMask);
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(rows.len() * vocab);
        let mut tgts = Vec::with_capacity(rows.len());
        let mut total = 0.0;
        for &r in &rows {
            let tgt = targets[r];
            if tgt >= vocab {
                return Err(DfrError::invalid(format!("target {tgt} out of range for vocabulary {vocab}")));
            }
            let row = &lv[r * vocab..(r + 1) * vocab];
            let (lse, p) = kernels::log_softmax_parts(row);
            total += lse - row[tgt];
            probs.extend(p);
            tgts.push(tgt);
        }
        let loss = total / rows.len() as f64;
        self.push_op(
            "softmax_xent",
            vec![1],
            vec![loss],
            Op::SoftmaxXent {
                logits,
                rows,
                targets: tgts,
                probs,
            },
            &[logits],
        )
    }

    /// Row-wise log-softmax restricted to the `allowed` entries of `[b, c]`;
    /// disallowed entries are output as 0 and receive no gradient.
    pub fn masked_log_softmax(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (b, c) = match s.as_slice() {
            [b, c] => (*b, *c),
            _ => return Err(shape_err("masked_log_softmax", &s, &[])),
        };
        if allowed.len() != b * c {
            return Err(shape_err("masked_log_softmax", &s, &[allowed.len()]));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; b * c];
        let mut probs = vec![0.0; b * c];
        for i in 0..b {
            let idx: Vec<usize> = (0..c).filter(|&j| allowed[i * c + j]).collect();
            if idx.is_empty() {
                continue;
            }
            let m = idx.iter().map(|&j| xv[i * c + j]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = idx.iter().map(|&j| (xv[i * c + j] - m).exp()).sum();
            let lse = m + z.ln();
            for &j in &idx {
                out[i * c + j] = xv[i * c + j] - lse;
                probs[i * c + j] = (xv[i * c + j] - lse).exp();
            }
        }
        self.push_op(
            "masked_log_softmax",
            s,
            out,
            Op::MaskedLogSoftmax {
                x,
                allowed: allowed.to_vec(),
                probs,
            },
            &[x],
        )
    }

    /// `Σ w_i x_i` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, w: &[f64]) -> Result<Var> {
        if w.len() != self.value(x).len() {
            return Err(shape_err("weighted_sum", self.shape(x), &[w.len()]));
        }
        let s: f64 = self.value(x).iter().zip(w).map(|(a, b)| a * b).sum();
        self.push_op("weighted_sum", vec![1], vec![s], Op::WeightedSum { x, w: w.to_vec() }, &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(DfrError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let is_leaf = matches!(node.op, Op::Leaf);
            let g = match if is_leaf { None } else { grads[i].take() } {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (m, k) = as_matrix(xs).expect("checked in forward");
                let n = self.shape(*w)[0];
                if let Some(dx) = self.grad_buf(grads, *x) {
                    gemm(m, n, k, g, n, 1, self.value(*w), k, 1, dx, k, 1.0);
                }
                if let Some(dw) = self.grad_buf(grads, *w) {
                    gemm(n, m, k, g, 1, n, self.value(*x), k, 1, dw, k, 1.0);
                }
                if let Some(b) = b {
                    if let Some(db) = self.grad_buf(grads, *b) {
                        for row in g.chunks(n.max(1)) {
                            db.iter_mut().zip(row).for_each(|(a, c)| *a += c);
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(da) = self.grad_buf(grads, *a) {
                    gemm(m, n, k, g, n, 1, self.value(*b), 1, n, da, k, 1.0);
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    gemm(k, m, n, self.value(*a), 1, k, g, n, 1, db, n, 1.0);
                }
            }
            Op::Transpose { x } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                if let Some(dx) = self.grad_buf(grads, *x) {
                    let gt = kernels::transpose(g, c, r);
                    dx.iter_mut().zip(gt).for_each(|(a, b)| *a += b);
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(d) = self.grad_buf(grads, *v) {
                        d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(da) = self.grad_buf(grads, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale { x, s } => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(a, b)| *a += s * b);
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x);
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * kernels::gelu_grad(xv[i]);
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let d = gv.len();
                if let Some(dg) = self.grad_buf(grads, *gain) {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xv[r * d + j] * inv;
                        }
                    }
                }
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let row = &xv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = (0..d).map(|j| gr[j] * gv[j] * row[j] * inv).sum::<f64>() / d as f64;
                        for j in 0..d {
                            let xhat = row[j] * inv;
                            dx[r * d + j] += inv * (gr[j] * gv[j] - xhat * dot);
                        }
                    }
                }
            }
            Op::Rope { x, cos, sin, n_heads } => {
                let (t, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                if let Some(dx) = self.grad_buf(grads, *x) {
                    let back = kernels::rotate_pairs(g, t, *n_heads, d / n_heads, cos, sin, true);
                    dx.iter_mut().zip(back).for_each(|(a, b)| *a += b);
                }
            }
            Op::Attention { q, k, v, n_heads, probs } => {
                let (t, d) = (self.shape(*q)[0], self.shape(*q)[1]);
                let (dq, dk, dv) =
                    kernels::attention_backward(g, self.value(*q), self.value(*k), self.value(*v), probs, t, d, *n_heads);
                for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
                    if let Some(buf) = self.grad_buf(grads, *var) {
                        buf.iter_mut().zip(delta).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(dt) = self.grad_buf(grads, *table) {
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[i * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if let Some(dp) = self.grad_buf(grads, *p) {
                        dp.iter_mut().zip(&g[off..off + n]).for_each(|(a, b)| *a += b);
                    }
                    off += n;
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::MeanRows { x } => {
                let n = self.shape(*x)[0];
                let d = g.len();
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for r in 0..n {
                        for j in 0..d {
                            dx[r * d + j] += g[j] / n as f64;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    dx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::SoftmaxXent {
                logits,
                rows,
                targets,
                probs,
            } => {
                let vocab = *self.shape(*logits).last().expect("2-D logits");
                let scale = g[0] / rows.len() as f64;
                if let Some(dl) = self.grad_buf(grads, *logits) {
                    for (k, (&r, &tgt)) in rows.iter().zip(targets).enumerate() {
                        let p = &probs[k * vocab..(k + 1) * vocab];
                        let dst = &mut dl[r * vocab..(r + 1) * vocab];
                        for j in 0..vocab {
                            dst[j] += scale * p[j];
                        }
                        dst[tgt] -= scale;
                    }
                }
            }
            Op::MaskedLogSoftmax { x, allowed, probs } => {
                let c = self.shape(*x)[1];
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for i in 0..allowed.len() / c.max(1) {
                        let s: f64 = (0..c).filter(|&j| allowed[i * c + j]).map(|j| g[i * c + j]).sum();
                        for j in 0..c {
                            if allowed[i * c + j] {
                                dx[i * c + j] += g[i * c + j] - probs[i * c + j] * s;
                            }
                        }
                    }
                }
            }
            Op::WeightedSum { x, w } => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    dx.iter_mut().zip(w).for_each(|(a, b)| *a += g[0] * b);
                }
            }
        }
    }
}
