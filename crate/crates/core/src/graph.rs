//! A small reverse-mode tape over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter as
//! borrowed leaves tagged with a [`ParamKey`]; only leaves whose group matches
//! the graph's trainable group take part in backpropagation, so frozen models
//! never receive a gradient.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Backbone,
    Adapters,
    Classifier,
    Language,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub group: Group,
    pub index: usize,
}

/// A named slot of trainable state.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub key: ParamKey,
}

impl Param {
    pub fn new(value: Tensor, group: Group, index: usize) -> Self {
        Self { value, key: ParamKey { group, index } }
    }
}

/// Gradient accumulators indexed by `ParamKey::index` for one group.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    pub group: Group,
    pub grads: Vec<Tensor>,
}

impl GradBuffer {
    pub fn for_params<'p>(group: Group, params: impl IntoIterator<Item = &'p Param>) -> Self {
        let mut grads = Vec::new();
        for p in params {
            debug_assert_eq!(p.key.group, group);
            debug_assert_eq!(p.key.index, grads.len());
            grads.push(Tensor::zeros(p.value.rows(), p.value.cols()));
        }
        Self { group, grads }
    }

    pub fn zero(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn scale(&mut self, s: f64) {
        self.grads.iter_mut().for_each(|g| g.scale_in_place(s));
    }

    pub fn merge(&mut self, other: &GradBuffer) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.grads.iter().map(Tensor::sum_squares).sum())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf(Option<ParamKey>),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    Softmax(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Gather { table: Var, ids: Vec<usize> },
    NllSum { logits: Var, targets: Vec<usize>, probs: Tensor },
    Unfold { x: Var, width: usize },
    MaxRows { x: Var, argmax: Vec<usize> },
    Sum(Var),
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    trainable: Option<Group>,
}

impl<'a> Graph<'a> {
    /// A graph that records no gradients.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), trainable: None }
    }

    /// A graph that backpropagates into parameters of `group` only.
    pub fn training(group: Group) -> Self {
        Self { nodes: Vec::new(), trainable: Some(group) }
    }

    pub fn trainable(&self) -> Option<Group> {
        self.trainable
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value<'a>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn param(&mut self, p: &'a Param) -> Var {
        let rg = self.trainable == Some(p.key.group);
        self.push(Value::Borrowed(&p.value), Op::Leaf(Some(p.key)), rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Value::Owned(t), Op::Leaf(None), false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Value::Borrowed(t), Op::Leaf(None), false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(Value::Owned(out), Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(Value::Owned(out), Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(Value::Owned(out), Op::Add(a, b), rg)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let mut out = self.value(a).clone();
        let b = self.value(bias);
        debug_assert_eq!(b.rows(), 1);
        debug_assert_eq!(b.cols(), out.cols());
        for i in 0..out.rows() {
            for (o, v) in out.row_mut(i).iter_mut().zip(b.data()) {
                *o += v;
            }
        }
        let rg = self.rg(&[a, bias]);
        self.push(Value::Owned(out), Op::AddRow(a, bias), rg)
    }

    /// `x · w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_in_place(s);
        let rg = self.rg(&[a]);
        self.push(Value::Owned(out), Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let rg = self.rg(&[a]);
        self.push(Value::Owned(out), Op::Relu(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let rg = self.rg(&[a]);
        self.push(Value::Owned(out), Op::Gelu(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = xv.row(i);
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            for (o, v) in xhat.row_mut(i).iter_mut().zip(r) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xhat.clone();
        for i in 0..rows {
            for ((o, gv), bv) in out.row_mut(i).iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(Value::Owned(out), Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg)
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked out.
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let limit = if causal { (i + 1).min(cols) } else { cols };
            let r = &xv.row(i)[..limit];
            let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = out.row_mut(i);
            let mut sum = 0.0;
            for j in 0..limit {
                let e = libm::exp(r[j] - max);
                o[j] = e;
                sum += e;
            }
            for v in &mut o[..limit] {
                *v /= sum;
            }
        }
        let rg = self.rg(&[x]);
        self.push(Value::Owned(out), Op::Softmax(x), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.rows(), len);
        for i in 0..xv.rows() {
            out.row_mut(i).copy_from_slice(&xv.row(i)[start..start + len]);
        }
        let rg = self.rg(&[x]);
        self.push(Value::Owned(out), Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for p in parts {
                let pv = self.value(*p);
                out.row_mut(i)[off..off + pv.cols()].copy_from_slice(pv.row(i));
                off += pv.cols();
            }
        }
        let rg = self.rg(parts);
        self.push(Value::Owned(out), Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Row lookup `table[ids[t]]` for every `t`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Tensor::zeros(ids.len(), tv.cols());
        for (t, &id) in ids.iter().enumerate() {
            out.row_mut(t).copy_from_slice(tv.row(id));
        }
        let rg = self.rg(&[table]);
        self.push(Value::Owned(out), Op::Gather { table, ids: ids.to_vec() }, rg)
    }

    /// `Σ_t −log softmax(logits_t)[targets_t]` as a 1x1 value.
    pub fn nll_sum(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        debug_assert_eq!(lv.rows(), targets.len());
        let mut probs = Tensor::zeros(lv.rows(), lv.cols());
        let mut total = 0.0;
        for (t, &y) in targets.iter().enumerate() {
            let r = lv.row(t);
            let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = probs.row_mut(t);
            let mut sum = 0.0;
            for (pv, v) in p.iter_mut().zip(r) {
                *pv = libm::exp(v - max);
                sum += *pv;
            }
            p.iter_mut().for_each(|v| *v /= sum);
            total += -(r[y] - max - libm::log(sum));
        }
        let rg = self.rg(&[logits]);
        self.push(
            Value::Owned(Tensor::scalar(total)),
            Op::NllSum { logits, targets: targets.to_vec(), probs },
            rg,
        )
    }

    /// Sliding windows of `width` consecutive rows, flattened: `(T − w + 1) x (w · cols)`.
    pub fn unfold(&mut self, x: Var, width: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        assert!(rows >= width, "unfold needs at least `width` rows");
        let n = rows - width + 1;
        let mut out = Tensor::zeros(n, width * cols);
        for i in 0..n {
            out.row_mut(i).copy_from_slice(&xv.data()[i * cols..(i + width) * cols]);
        }
        let rg = self.rg(&[x]);
        self.push(Value::Owned(out), Op::Unfold { x, width }, rg)
    }

    /// Column-wise max over rows: `1 x cols`.
    pub fn max_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut out = Tensor::filled(1, cols, f64::NEG_INFINITY);
        let mut argmax = vec![0usize; cols];
        for i in 0..rows {
            for (j, v) in xv.row(i).iter().enumerate() {
                if *v > out.data()[j] {
                    out.data_mut()[j] = *v;
                    argmax[j] = i;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Value::Owned(out), Op::MaxRows { x, argmax }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Value::Owned(Tensor::scalar(s)), Op::Sum(x), rg)
    }

    /// Backpropagates `scale · ∂loss` into `out` (gradients accumulate).
    pub fn backward(&self, loss: Var, scale: f64, out: &mut GradBuffer) {
        let Some(group) = self.trainable else { return };
        debug_assert_eq!(group, out.group);
        if !self.nodes[loss.0].requires_grad {
            return;
        }
        debug_assert_eq!(self.value(loss).len(), 1);
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(scale));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf(key) => {
                    if let Some(key) = key {
                        out.grads[key.index].add_assign(&g);
                    }
                }
                Op::MatMul(a, b) => {
                    if self.requires_grad(*a) {
                        let buf = slot(&mut grads, self, *a);
                        gemm_nt(&g, self.value(*b), buf);
                    }
                    if self.requires_grad(*b) {
                        let av = self.value(*a);
                        let buf = slot(&mut grads, self, *b);
                        gemm_tn(av, &g, buf);
                    }
                }
                Op::MatMulT(a, b) => {
                    // C = A Bᵀ: dA = dC B, dB = dCᵀ A
                    if self.requires_grad(*a) {
                        let buf = slot(&mut grads, self, *a);
                        gemm_nn(&g, self.value(*b), buf);
                    }
                    if self.requires_grad(*b) {
                        let av = self.value(*a);
                        let buf = slot(&mut grads, self, *b);
                        gemm_tn(&g, av, buf);
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.requires_grad(v) {
                            slot(&mut grads, self, v).add_assign(&g);
                        }
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.requires_grad(*bias) {
                        let buf = slot(&mut grads, self, *bias);
                        for i in 0..g.rows() {
                            for (o, v) in buf.data_mut().iter_mut().zip(g.row(i)) {
                                *o += v;
                            }
                        }
                    }
                    if self.requires_grad(*a) {
                        slot(&mut grads, self, *a).add_assign(&g);
                    }
                }
                Op::Scale(a, s) => {
                    if self.requires_grad(*a) {
                        slot(&mut grads, self, *a).axpy(*s, &g);
                    }
                }
                Op::Relu(a) => {
                    if self.requires_grad(*a) {
                        let y = node.value.get();
                        let buf = slot(&mut grads, self, *a);
                        for ((o, gv), yv) in buf.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                            if *yv > 0.0 {
                                *o += gv;
                            }
                        }
                    }
                }
                Op::Gelu(a) => {
                    if self.requires_grad(*a) {
                        let x = self.value(*a);
                        let mut d = g.clone();
                        for (dv, xv) in d.data_mut().iter_mut().zip(x.data()) {
                            *dv *= gelu_grad(*xv);
                        }
                        slot(&mut grads, self, *a).add_assign(&d);
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let (rows, cols) = g.shape();
                    if self.requires_grad(*gamma) {
                        let buf = slot(&mut grads, self, *gamma);
                        for i in 0..rows {
                            for ((o, gv), hv) in
                                buf.data_mut().iter_mut().zip(g.row(i)).zip(xhat.row(i))
                            {
                                *o += gv * hv;
                            }
                        }
                    }
                    if self.requires_grad(*beta) {
                        let buf = slot(&mut grads, self, *beta);
                        for i in 0..rows {
                            for (o, gv) in buf.data_mut().iter_mut().zip(g.row(i)) {
                                *o += gv;
                            }
                        }
                    }
                    if self.requires_grad(*x) {
                        let gam = self.value(*gamma).data().to_vec();
                        let buf = slot(&mut grads, self, *x);
                        let mut dxhat = vec![0.0; cols];
                        for i in 0..rows {
                            for j in 0..cols {
                                dxhat[j] = g.get(i, j) * gam[j];
                            }
                            let h = xhat.row(i);
                            let m1 = dxhat.iter().sum::<f64>() / cols as f64;
                            let m2 = dot(&dxhat, h) / cols as f64;
                            let is = inv_std[i];
                            for (j, o) in buf.row_mut(i).iter_mut().enumerate() {
                                *o += is * (dxhat[j] - m1 - h[j] * m2);
                            }
                        }
                    }
                }
                Op::Softmax(x) => {
                    if self.requires_grad(*x) {
                        let p = node.value.get();
                        let buf = slot(&mut grads, self, *x);
                        for i in 0..p.rows() {
                            let pr = p.row(i);
                            let gr = g.row(i);
                            let s = dot(pr, gr);
                            for (j, o) in buf.row_mut(i).iter_mut().enumerate() {
                                *o += pr[j] * (gr[j] - s);
                            }
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    if self.requires_grad(*x) {
                        let buf = slot(&mut grads, self, *x);
                        for i in 0..g.rows() {
                            let dst = &mut buf.row_mut(i)[*start..*start + g.cols()];
                            for (o, v) in dst.iter_mut().zip(g.row(i)) {
                                *o += v;
                            }
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        if self.requires_grad(*p) {
                            let buf = slot(&mut grads, self, *p);
                            for i in 0..g.rows() {
                                for (o, v) in buf.row_mut(i).iter_mut().zip(&g.row(i)[off..off + w]) {
                                    *o += v;
                                }
                            }
                        }
                        off += w;
                    }
                }
                Op::Gather { table, ids } => {
                    if self.requires_grad(*table) {
                        let buf = slot(&mut grads, self, *table);
                        for (t, &id) in ids.iter().enumerate() {
                            for (o, v) in buf.row_mut(id).iter_mut().zip(g.row(t)) {
                                *o += v;
                            }
                        }
                    }
                }
                Op::NllSum { logits, targets, probs } => {
                    if self.requires_grad(*logits) {
                        let s = g.item();
                        let buf = slot(&mut grads, self, *logits);
                        for (t, &y) in targets.iter().enumerate() {
                            let pr = probs.row(t);
                            let o = buf.row_mut(t);
                            for (ov, pv) in o.iter_mut().zip(pr) {
                                *ov += s * pv;
                            }
                            o[y] -= s;
                        }
                    }
                }
                Op::Unfold { x, width } => {
                    if self.requires_grad(*x) {
                        let buf = slot(&mut grads, self, *x);
                        let cols = buf.cols();
                        for i in 0..g.rows() {
                            let dst = &mut buf.data_mut()[i * cols..(i + width) * cols];
                            for (o, v) in dst.iter_mut().zip(g.row(i)) {
                                *o += v;
                            }
                        }
                    }
                }
                Op::MaxRows { x, argmax } => {
                    if self.requires_grad(*x) {
                        let buf = slot(&mut grads, self, *x);
                        for (j, &i) in argmax.iter().enumerate() {
                            let v = buf.get(i, j) + g.data()[j];
                            buf.set(i, j, v);
                        }
                    }
                }
                Op::Sum(x) => {
                    if self.requires_grad(*x) {
                        let s = g.item();
                        let buf = slot(&mut grads, self, *x);
                        buf.data_mut().iter_mut().for_each(|v| *v += s);
                    }
                }
            }
        }
    }
}

fn slot<'g>(grads: &'g mut [Option<Tensor>], graph: &Graph<'_>, v: Var) -> &'g mut Tensor {
    let (r, c) = graph.value(v).shape();
    grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c))
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = libm::tanh(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
