//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. Nodes whose
//! inputs do not require gradients are stored as constants, so inference
//! through a tape records no backward state.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::kernels::{self, AttentionLayout, NormStats, RowMask, SavedProbs};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
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
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: NormStats },
    Attention { q: Var, k: Var, v: Var, layout: AttentionLayout, mask: RowMask, probs: SavedProbs },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Var, Var),
    SliceRows(Var, usize),
    SliceLast(Var, usize),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Single-threaded; build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn remove(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: if requires_grad { Op::Leaf } else { Op::Constant },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// `a` with leading axes flattened, times 2-D `b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.shape().is_empty() || av.last_dim() != bv.shape()[0] {
            return Err(mismatch("matmul", av, bv));
        }
        let (m, k, n) = (av.leading(), av.last_dim(), bv.shape()[1]);
        let data = kernels::matmul(av.data(), bv.data(), m, k, n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("add", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a 1-D `bias` along the last axis of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.shape().len() != 1 || bv.len() != av.last_dim() {
            return Err(mismatch("add_bias", av, bv));
        }
        let n = bv.len();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBias(a, bias), &[a, bias]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("mul", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Multiplies leading-row `i` of `a` by `scales[i]`.
    pub fn scale_rows(&mut self, a: Var, scales: Vec<f64>) -> Result<Var> {
        let av = self.value(a);
        if scales.len() != av.leading() {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                lhs: av.shape().to_vec(),
                rhs: vec![scales.len()],
            });
        }
        let n = av.last_dim();
        let mut data = av.data().to_vec();
        for (row, s) in data.chunks_mut(n).zip(&scales) {
            row.iter_mut().for_each(|x| *x *= s);
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::ScaleRows(a, scales), &[a]))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = kernels::softmax_rows(av.data(), av.last_dim());
        let out = Tensor::new(av.shape().to_vec(), data).expect("softmax keeps shape");
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Layer norm over the last axis with learned `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.last_dim();
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(mismatch("layer_norm", xv, gv));
        }
        let (data, stats) = kernels::layer_norm(xv.data(), gv.data(), bv.data(), d);
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, stats }, &[x, gamma, beta]))
    }

    /// Multi-head attention over token cubes laid out as `rows x cols x dim`
    /// (any leading shape with that many elements).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout, mask: RowMask) -> Result<Var> {
        let requires = [q, k, v].iter().any(|x| self.requires_grad(*x));
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(mismatch("attention", qv, kv));
        }
        let (data, probs) = kernels::attention(qv.data(), kv.data(), vv.data(), &layout, &mask, requires)?;
        let out = Tensor::new(qv.shape().to_vec(), data)?;
        let probs = probs.unwrap_or_default();
        Ok(self.push(out, Op::Attention { q, k, v, layout, mask, probs }, &[q, k, v]))
    }

    /// Rows of a 2-D tensor (or leading rows of any tensor) by index; also the
    /// embedding lookup.
    pub fn gather_rows(&mut self, src: Var, idx: Vec<usize>) -> Result<Var> {
        let sv = self.value(src);
        let (n, d) = (sv.leading(), sv.last_dim());
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                reason: format!("index out of range for {n} rows"),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            data.extend_from_slice(&sv.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![idx.len(), d], data)?;
        Ok(self.push(out, Op::GatherRows(src, idx), &[src]))
    }

    /// Concatenation along axis 0; trailing axes must match.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().is_empty() || av.shape()[1..] != bv.shape()[1..] || bv.shape().is_empty() {
            return Err(mismatch("concat_rows", av, bv));
        }
        let mut shape = av.shape().to_vec();
        shape[0] += bv.shape()[0];
        let mut data = Vec::with_capacity(av.len() + bv.len());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::ConcatRows(a, b), &[a, b]))
    }

    /// Slice `start..end` along axis 0.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if av.shape().is_empty() || start >= end || end > av.shape()[0] {
            return Err(TensorError::InvalidArgument {
                op: "slice_rows",
                reason: format!("range {start}..{end} invalid for shape {:?}", av.shape()),
            });
        }
        let stride = av.len() / av.shape()[0];
        let data = av.data()[start * stride..end * stride].to_vec();
        let mut shape = av.shape().to_vec();
        shape[0] = end - start;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::SliceRows(a, start), &[a]))
    }

    /// Keeps the first `width` entries of the last axis.
    pub fn slice_last(&mut self, a: Var, width: usize) -> Result<Var> {
        let av = self.value(a);
        let d = av.last_dim();
        if width == 0 || width > d {
            return Err(TensorError::InvalidArgument {
                op: "slice_last",
                reason: format!("width {width} outside 1..={d}"),
            });
        }
        let mut data = Vec::with_capacity(av.leading() * width);
        for row in av.data().chunks(d) {
            data.extend_from_slice(&row[..width]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::SliceLast(a, width), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean softmax cross-entropy of `logits: T x C` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let c = lv.last_dim();
        if lv.shape().len() != 2 || lv.leading() != labels.len() || labels.iter().any(|&y| y >= c) {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy",
                reason: format!("logits {:?} vs {} labels", lv.shape(), labels.len()),
            });
        }
        let probs = kernels::softmax_rows(lv.data(), c);
        let mut loss = 0.0;
        for (row, &y) in probs.chunks(c).zip(labels) {
            loss -= row[y].max(f64::MIN_POSITIVE).ln();
        }
        loss /= labels.len() as f64;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Gradients of scalar `loss` with respect to every gradient-requiring
    /// leaf. Leaves the loss does not depend on map to zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                let data = grads.get_mut(i).and_then(Option::take).unwrap_or_else(|| vec![0.0; node.value.len()]);
                let t = Tensor::new(node.value.shape().to_vec(), data).expect("gradient shape");
                out.grads.insert(Var(i), t);
            }
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.leading(), av.last_dim(), bv.shape()[1]);
                if self.requires_grad(*a) {
                    // dA = dY * B^T
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, 1.0, g, n, 1, bv.data(), 1, n, 0.0, &mut da, k, 1);
                    acc(*a, da);
                }
                if self.requires_grad(*b) {
                    // dB = A^T * dY
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, 1.0, av.data(), 1, k, g, n, 1, 0.0, &mut db, n, 1);
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::AddBias(a, bias) => {
                acc(*a, g.to_vec());
                let n = self.value(*bias).len();
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                }
                acc(*bias, db);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g.iter().zip(bv.data()).map(|(x, y)| x * y).collect());
                acc(*b, g.iter().zip(av.data()).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|x| x * s).collect()),
            Op::ScaleRows(a, scales) => {
                let n = self.value(*a).last_dim();
                let mut d = g.to_vec();
                for (row, s) in d.chunks_mut(n).zip(scales) {
                    row.iter_mut().for_each(|x| *x *= s);
                }
                acc(*a, d);
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                acc(*a, g.iter().zip(av.data()).map(|(d, &x)| d * kernels::gelu_grad(x)).collect());
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dotp: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..d {
                        dr[i] = yr[i] * (gr[i] - dotp);
                    }
                }
                acc(*a, dx);
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let xv = self.value(*x);
                let (dx, dg, db) = kernels::layer_norm_backward(xv.data(), self.value(*gamma).data(), stats, g, xv.last_dim());
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::Attention { q, k, v, layout, mask, probs } => {
                let (dq, dk, dv) = kernels::attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    layout,
                    mask,
                    probs,
                    g,
                );
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::GatherRows(src, idx) => {
                let sv = self.value(*src);
                let d = sv.last_dim();
                let mut ds = vec![0.0; sv.len()];
                for (row, &i) in g.chunks(d).zip(idx) {
                    ds[i * d..(i + 1) * d].iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                acc(*src, ds);
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).len();
                acc(*a, g[..na].to_vec());
                acc(*b, g[na..].to_vec());
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let stride = av.len() / av.shape()[0];
                let mut d = vec![0.0; av.len()];
                d[start * stride..start * stride + g.len()].copy_from_slice(g);
                acc(*a, d);
            }
            Op::SliceLast(a, width) => {
                let av = self.value(*a);
                let dfull = av.last_dim();
                let mut d = vec![0.0; av.len()];
                for (dr, gr) in d.chunks_mut(dfull).zip(g.chunks(*width)) {
                    dr[..*width].copy_from_slice(gr);
                }
                acc(*a, d);
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.value(*logits).last_dim();
                let scale = g[0] / labels.len() as f64;
                let mut d = probs.clone();
                for (row, &y) in d.chunks_mut(c).zip(labels) {
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|x| *x *= scale);
                }
                acc(*logits, d);
            }
        }
    }
}
