use std::sync::Arc;

use super::kernels::{
    axis_split, broadcast_shape, broadcast_strides, dot, for_each_broadcast, gemm_nn, gemm_nt,
    gemm_tn,
};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Receiver-major sparse edge list. Edges of receiver `i` occupy
/// `offsets[i]..offsets[i + 1]`; `neighbors[e]` is the sending node of edge
/// `e` and `receivers[e]` repeats `i` for convenience.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub offsets: Vec<usize>,
    pub neighbors: Vec<usize>,
    pub receivers: Vec<usize>,
}

impl Csr {
    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut neighbors = Vec::new();
        let mut receivers = Vec::new();
        offsets.push(0);
        for (i, list) in lists.iter().enumerate() {
            neighbors.extend_from_slice(list);
            receivers.extend(std::iter::repeat_n(i, list.len()));
            offsets.push(neighbors.len());
        }
        Csr { offsets, neighbors, receivers }
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.len()
    }

    pub fn segment(&self, node: usize) -> std::ops::Range<usize> {
        self.offsets[node]..self.offsets[node + 1]
    }
}

#[derive(Debug, Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinKind, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Sum { x: Var, axis: usize },
    SumAll(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Abs(Var),
    Softmax(Var, usize),
    SegmentSum { x: Var, axis: usize, segments: Arc<Vec<usize>> },
    Gather { x: Var, axis: usize, index: Arc<Vec<usize>> },
    Propagate { x: Var, w: Var, csr: Arc<Csr> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Operation tape. Values are computed eagerly as operations are recorded.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::invalid(format!("{op}: {detail}"))
}

fn check_axis(op: &str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(shape_err(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    /// `a[..., k] x b[k, n] -> [..., n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k.max(1);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm_nn(&self.value(a).data, &self.value(b).data, &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(&ta.shape, &tb.shape).ok_or_else(|| {
            shape_err("broadcast", format!("{:?} vs {:?}", ta.shape, tb.shape))
        })?;
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let data = if ta.shape == tb.shape {
            ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let n: usize = shape.iter().product();
            let mut out = vec![0.0; n];
            let sa = broadcast_strides(&ta.shape, &shape);
            let sb = broadcast_strides(&tb.shape, &shape);
            for_each_broadcast(&shape, &sa, &sb, |o, i, j| out[o] = f(ta.data[i], tb.data[j]));
            out
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|v| v * c).collect();
        let value = Tensor { shape: t.shape.clone(), data };
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|v| v + c).collect();
        let value = Tensor { shape: t.shape.clone(), data };
        let rg = self.rg(x);
        self.push(value, Op::AddScalar(x), rg)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (p, q))| d == axis || p == q);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let block = t.shape[axis] * inner;
                out.extend_from_slice(&t.data[o * block..(o + 1) * block]);
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor { shape, data: out }, Op::Concat(xs.to_vec(), axis), rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_axis("slice", &s, axis)?;
        if start + len > s[axis] {
            return Err(shape_err("slice", format!("{start}+{len} exceeds axis {axis} of {s:?}")));
        }
        let (outer, alen, inner) = axis_split(&s, axis);
        let src = &self.value(x).data;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data: out }, Op::Slice { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", format!("axes {axes:?} for {s:?}")));
        }
        let shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
        let src_strides = broadcast_strides(&s, &s);
        let perm_strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
        let zeros = vec![0; s.len()];
        let src = &self.value(x).data;
        let mut out = vec![0.0; src.len()];
        for_each_broadcast(&shape, &perm_strides, &zeros, |o, i, _| out[o] = src[i]);
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data: out }, Op::Permute(x, axes.to_vec()), rg))
    }

    /// Sum over `axis`; the axis is kept with extent 1 when `keepdim`.
    pub fn sum(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_axis("sum", &s, axis)?;
        let (outer, len, inner) = axis_split(&s, axis);
        let src = &self.value(x).data;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, v) in dst.iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let mut shape = s;
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data: out }, Op::Sum { x, axis }, rg))
    }

    pub fn mean(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| shape_err("mean", format!("axis {axis}")))?;
        let s = self.sum(x, axis, keepdim)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::SumAll(x), rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|&v| f(v)).collect();
        let value = Tensor { shape: t.shape.clone(), data };
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, stable_sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_axis("softmax", &s, axis)?;
        let (outer, len, inner) = axis_split(&s, axis);
        let src = &self.value(x).data;
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |l: usize| (o * len + l) * inner + j;
                let max = (0..len).map(|l| src[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in 0..len {
                    let e = (src[at(l)] - max).exp();
                    out[at(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    out[at(l)] /= total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: s, data: out }, Op::Softmax(x, axis), rg))
    }

    /// Scatter-add along `axis`: entry `e` of the axis lands in segment
    /// `segments[e]`, giving an axis of extent `num_segments`.
    pub fn segment_sum(
        &mut self,
        x: Var,
        axis: usize,
        segments: Arc<Vec<usize>>,
        num_segments: usize,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_axis("segment_sum", &s, axis)?;
        if s[axis] != segments.len() || segments.iter().any(|&g| g >= num_segments) {
            return Err(shape_err(
                "segment_sum",
                format!("{} segment ids for axis of {} into {num_segments}", segments.len(), s[axis]),
            ));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let src = &self.value(x).data;
        let mut out = vec![0.0; outer * num_segments * inner];
        for o in 0..outer {
            for (e, &g) in segments.iter().enumerate() {
                let row = &src[(o * len + e) * inner..(o * len + e + 1) * inner];
                let dst = &mut out[(o * num_segments + g) * inner..(o * num_segments + g + 1) * inner];
                for (d, v) in dst.iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let mut shape = s;
        shape[axis] = num_segments;
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data: out }, Op::SegmentSum { x, axis, segments }, rg))
    }

    /// Selects entries `index[..]` along `axis`.
    pub fn gather(&mut self, x: Var, axis: usize, index: Arc<Vec<usize>>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_axis("gather", &s, axis)?;
        if let Some(&bad) = index.iter().find(|&&i| i >= s[axis]) {
            return Err(shape_err("gather", format!("index {bad} out of range for {s:?} axis {axis}")));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let src = &self.value(x).data;
        let mut out = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &i in index.iter() {
                out.extend_from_slice(&src[(o * len + i) * inner..(o * len + i + 1) * inner]);
            }
        }
        let mut shape = s;
        shape[axis] = index.len();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data: out }, Op::Gather { x, axis, index }, rg))
    }

    /// Weighted sparse message passing,
    /// `out[b, .., i, :] = sum_{e in seg(i)} w[b, e] * x[b, .., nbr(e), :]`.
    ///
    /// `x` has shape `[B, .., N, D]` and `w` holds `B * E` values. This is
    /// `segment_sum(w * gather(x))` without materializing the per-edge tensor.
    pub fn propagate(&mut self, x: Var, w: Var, csr: Arc<Csr>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (b, mid, n, d) = propagate_dims(&s)?;
        if n != csr.num_nodes() {
            return Err(shape_err("propagate", format!("{n} nodes vs graph of {}", csr.num_nodes())));
        }
        let e = csr.num_edges();
        if self.value(w).len() != b * e {
            return Err(shape_err(
                "propagate",
                format!("weights {:?} for batch {b} and {e} edges", self.shape(w)),
            ));
        }
        let xs = &self.value(x).data;
        let ws = &self.value(w).data;
        let mut out = vec![0.0; xs.len()];
        for bi in 0..b {
            let wb = &ws[bi * e..(bi + 1) * e];
            for p in 0..mid {
                let base = (bi * mid + p) * n * d;
                for i in 0..n {
                    let dst = &mut out[base + i * d..base + (i + 1) * d];
                    for ei in csr.segment(i) {
                        let wv = wb[ei];
                        let j = csr.neighbors[ei];
                        let src = &xs[base + j * d..base + (j + 1) * d];
                        for (o, v) in dst.iter_mut().zip(src) {
                            *o += wv * v;
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor { shape: s, data: out }, Op::Propagate { x, w, csr }, rg))
    }

    /// Reverse pass from a one-element `loss`. Gradients are kept for leaves only.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_retaining(loss, &[])
    }

    /// Like [`Graph::backward`] but also keeps the gradients of `retain`.
    pub fn backward_retaining(&self, loss: Var, retain: &[Var]) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::invalid(format!("backward needs a scalar loss, got {:?}", lv.shape)));
        }
        let mut keep = vec![false; self.nodes.len()];
        for v in retain {
            keep[v.0] = true;
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor { shape: lv.shape.clone(), data: vec![1.0] });
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) || keep[i] {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let t = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape.clone()));
        f(&mut t.data);
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = &g.data;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (k, n) = (tb.shape[0], tb.shape[1]);
                let m = ta.len() / k.max(1);
                self.accumulate(grads, *a, |ga| gemm_nt(gd, &tb.data, ga, m, k, n));
                self.accumulate(grads, *b, |gb| gemm_tn(&ta.data, gd, gb, m, k, n));
            }
            Op::Binary(kind, a, b) => self.backprop_binary(*kind, *a, *b, node, gd, grads),
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().zip(gd).for_each(|(d, v)| *d += c * v))
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().zip(gd).for_each(|(d, v)| *d += v))
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = axis_split(&node.value.shape, *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    self.accumulate(grads, x, |gx| {
                        for o in 0..outer {
                            let src = &gd[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut gx[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(d, v)| *d += v);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, alen, inner) = axis_split(self.shape(*x), *axis);
                let len = node.value.shape[*axis];
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        let base = (o * alen + start) * inner;
                        let src = &gd[o * len * inner..(o + 1) * len * inner];
                        gx[base..base + len * inner].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::Permute(x, axes) => {
                let s = self.shape(*x);
                let src_strides = broadcast_strides(s, s);
                let perm: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
                let zeros = vec![0; s.len()];
                self.accumulate(grads, *x, |gx| {
                    for_each_broadcast(&node.value.shape, &perm, &zeros, |o, i, _| gx[i] += gd[o])
                });
            }
            Op::Sum { x, axis } => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        let src = &gd[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, v)| *d += v);
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let v = gd[0];
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|d| *d += v));
            }
            Op::Sigmoid(x) => {
                let y = &node.value.data;
                self.accumulate(grads, *x, |gx| {
                    for ((d, gv), yv) in gx.iter_mut().zip(gd).zip(y) {
                        *d += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = &node.value.data;
                self.accumulate(grads, *x, |gx| {
                    for ((d, gv), yv) in gx.iter_mut().zip(gd).zip(y) {
                        *d += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::Relu(x) | Op::LeakyRelu(x, _) | Op::Abs(x) => {
                let xin = &self.value(*x).data;
                let deriv = |v: f64| match &node.op {
                    Op::Relu(_) => f64::from(u8::from(v > 0.0)),
                    Op::LeakyRelu(_, s) => {
                        if v > 0.0 {
                            1.0
                        } else {
                            *s
                        }
                    }
                    _ => {
                        if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    }
                };
                self.accumulate(grads, *x, |gx| {
                    for ((d, gv), &v) in gx.iter_mut().zip(gd).zip(xin) {
                        *d += gv * deriv(v);
                    }
                });
            }
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = axis_split(&node.value.shape, *axis);
                let y = &node.value.data;
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + j;
                            let inner_prod: f64 = (0..len).map(|l| gd[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                gx[at(l)] += y[at(l)] * (gd[at(l)] - inner_prod);
                            }
                        }
                    }
                });
            }
            Op::SegmentSum { x, axis, segments } => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                let nseg = node.value.shape[*axis];
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for (e, &sgm) in segments.iter().enumerate() {
                            let src = &gd[(o * nseg + sgm) * inner..(o * nseg + sgm + 1) * inner];
                            let dst = &mut gx[(o * len + e) * inner..(o * len + e + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, v)| *d += v);
                        }
                    }
                });
            }
            Op::Gather { x, axis, index } => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                let m = index.len();
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for (e, &i) in index.iter().enumerate() {
                            let src = &gd[(o * m + e) * inner..(o * m + e + 1) * inner];
                            let dst = &mut gx[(o * len + i) * inner..(o * len + i + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, v)| *d += v);
                        }
                    }
                });
            }
            Op::Propagate { x, w, csr } => {
                let (b, mid, n, d) = propagate_dims(self.shape(*x)).expect("validated in forward");
                let e = csr.num_edges();
                let xs = &self.value(*x).data;
                let ws = &self.value(*w).data;
                self.accumulate(grads, *x, |gx| {
                    for bi in 0..b {
                        for p in 0..mid {
                            let base = (bi * mid + p) * n * d;
                            for i in 0..n {
                                let src = &gd[base + i * d..base + (i + 1) * d];
                                for ei in csr.segment(i) {
                                    let wv = ws[bi * e + ei];
                                    let j = csr.neighbors[ei];
                                    let dst = &mut gx[base + j * d..base + (j + 1) * d];
                                    dst.iter_mut().zip(src).for_each(|(o, v)| *o += wv * v);
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *w, |gw| {
                    for bi in 0..b {
                        for p in 0..mid {
                            let base = (bi * mid + p) * n * d;
                            for i in 0..n {
                                let gi = &gd[base + i * d..base + (i + 1) * d];
                                for ei in csr.segment(i) {
                                    let j = csr.neighbors[ei];
                                    gw[bi * e + ei] += dot(gi, &xs[base + j * d..base + (j + 1) * d]);
                                }
                            }
                        }
                    }
                });
            }
        }
    }

    fn backprop_binary(
        &self,
        kind: BinKind,
        a: Var,
        b: Var,
        node: &Node,
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = &node.value.shape;
        let sa = broadcast_strides(&ta.shape, out_shape);
        let sb = broadcast_strides(&tb.shape, out_shape);
        let (ad, bd) = (&ta.data, &tb.data);
        self.accumulate(grads, a, |ga| {
            for_each_broadcast(out_shape, &sa, &sb, |o, i, j| {
                ga[i] += match kind {
                    BinKind::Add | BinKind::Sub => gd[o],
                    BinKind::Mul => gd[o] * bd[j],
                    BinKind::Div => gd[o] / bd[j],
                }
            })
        });
        self.accumulate(grads, b, |gb| {
            for_each_broadcast(out_shape, &sa, &sb, |o, i, j| {
                gb[j] += match kind {
                    BinKind::Add => gd[o],
                    BinKind::Sub => -gd[o],
                    BinKind::Mul => gd[o] * ad[i],
                    BinKind::Div => -gd[o] * ad[i] / (bd[j] * bd[j]),
                }
            })
        });
    }
}

fn propagate_dims(s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if s.len() < 3 {
        return Err(shape_err("propagate", format!("input {s:?} must be [B, .., N, D]")));
    }
    let r = s.len();
    Ok((s[0], s[1..r - 2].iter().product(), s[r - 2], s[r - 1]))
}
