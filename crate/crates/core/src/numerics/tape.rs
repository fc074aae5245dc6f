//! Reverse-mode differentiation over a dynamically recorded list of coarse
//! primitives (matmul, layer norm, grouped attention, softmax, ...).
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward pass is a single reverse sweep.
//! Shape errors inside the tape are programming errors and panic; the public
//! model entry points validate user-facing shapes before recording.

use std::sync::Arc;

use super::ops::{log_softmax_into, softmax_into, PROB_FLOOR};
use super::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row groups for grouped attention: attention runs within each group only.
pub type Groups = Arc<Vec<Vec<usize>>>;

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: Groups,
        // per (group, head), row-major g x g probabilities
        probs: Vec<Vec<f64>>,
    },
    GatherRows {
        sources: Vec<Var>,
        index: Arc<Vec<(usize, usize)>>,
    },
    GroupMean {
        x: Var,
        groups: Groups,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SoftmaxRows(Var, f64),
    LogSoftmaxRows(Var, f64),
    Log(Var),
    Dot(Var, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every node after [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Adjoint of `v`, or zeros shaped like `like` when nothing reached it.
    pub fn take_or_zeros(&mut self, v: Var, like: &Tensor) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    /// Direct inputs of a node, in recording order.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Shift(x)
            | Op::Gelu(x)
            | Op::SoftmaxRows(x, _)
            | Op::LogSoftmaxRows(x, _)
            | Op::Log(x)
            | Op::Dot(x, _) => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::GatherRows { sources, .. } => sources.clone(),
            Op::GroupMean { x, .. } | Op::NormalizeRows { x, .. } => vec![*x],
        }
    }

    /// Leaves on some path feeding `from`, in recording order.
    pub fn leaves_of(&self, from: Var) -> Vec<Var> {
        let mut stack = vec![from];
        let mut seen = vec![false; self.nodes.len()];
        let mut out = Vec::new();
        while let Some(v) = stack.pop() {
            if seen[v.0] {
                continue;
            }
            seen[v.0] = true;
            if self.is_leaf(v) {
                out.push(v);
            }
            stack.extend(self.inputs(v));
        }
        out.sort_by_key(|v| v.0);
        out
    }

    /// True when `target` lies on some path feeding `from`.
    pub fn depends_on(&self, from: Var, target: Var) -> bool {
        let mut stack = vec![from];
        let mut seen = vec![false; self.nodes.len()];
        while let Some(v) = stack.pop() {
            if v == target {
                return true;
            }
            if v.0 < target.0 || seen[v.0] {
                continue;
            }
            seen[v.0] = true;
            stack.extend(self.inputs(v));
        }
        false
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(av.rank() == 2 && bv.rank() == 2, "matmul needs matrices");
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        assert_eq!(k, bv.shape()[0], "matmul inner dimension");
        let mut out = vec![0.0; m * n];
        gemm(av.data(), false, bv.data(), false, m, k, n, &mut out, 0.0);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shapes");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        self.push(Tensor::from_parts(av.shape().to_vec(), data), Op::Add(a, b))
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        assert_eq!(bv.len(), n, "row bias length");
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (r, b) in row.iter_mut().zip(bv.data()) {
                *r += b;
            }
        }
        self.push(
            Tensor::from_parts(xv.shape().to_vec(), data),
            Op::AddRow(x, bias),
        )
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * alpha).collect();
        self.push(
            Tensor::from_parts(xv.shape().to_vec(), data),
            Op::Scale(x, alpha),
        )
    }

    /// `x + offset` for a constant `offset` of the same shape.
    pub fn shift(&mut self, x: Var, offset: &Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), offset.len(), "shift length");
        let data = xv
            .data()
            .iter()
            .zip(offset.data())
            .map(|(a, b)| a + b)
            .collect();
        self.push(Tensor::from_parts(xv.shape().to_vec(), data), Op::Shift(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu(v)).collect();
        self.push(Tensor::from_parts(xv.shape().to_vec(), data), Op::Gelu(x))
    }

    /// Layer norm over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let rows = xv.rows();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert!(g.len() == n && b.len() == n, "layer norm affine length");
        let mut xhat = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = g[j] * h + b[j];
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product attention restricted to row groups.
    ///
    /// `q`, `k`, `v` are `N x d` with `d` divisible by `heads`; each group is a
    /// list of row indices that attend among themselves. Rows not covered by
    /// any group produce zeros.
    pub fn grouped_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: Groups,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        assert!(
            qv.shape() == kv.shape() && kv.shape() == vv.shape(),
            "qkv shapes"
        );
        let d = qv.cols();
        assert!(heads > 0 && d % heads == 0, "head split");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; qv.len()];
        let mut probs = Vec::with_capacity(groups.len() * heads);
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for group in groups.iter() {
            let g = group.len();
            for h in 0..heads {
                let off = h * dh;
                let mut p = vec![0.0; g * g];
                for (i, &ri) in group.iter().enumerate() {
                    let qi = &qd[ri * d + off..ri * d + off + dh];
                    let row = &mut p[i * g..(i + 1) * g];
                    for (j, &rj) in group.iter().enumerate() {
                        let kj = &kd[rj * d + off..rj * d + off + dh];
                        row[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    let logits = row.to_vec();
                    softmax_into(&logits, 1.0, row);
                    let o = &mut out[ri * d + off..ri * d + off + dh];
                    for (j, &rj) in group.iter().enumerate() {
                        let pij = row[j];
                        let vj = &vd[rj * d + off..rj * d + off + dh];
                        for (oo, vv) in o.iter_mut().zip(vj) {
                            *oo += pij * vv;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let shape = qv.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            },
        )
    }

    /// Attention probabilities recorded by a grouped-attention node, one
    /// `g x g` matrix per (group, head).
    pub fn attention_probs(&self, v: Var) -> Option<&[Vec<f64>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Output row `i` is row `index[i].1` of `sources[index[i].0]`.
    pub fn gather_rows(&mut self, sources: &[Var], index: Arc<Vec<(usize, usize)>>) -> Var {
        let cols = self.value(sources[0]).cols();
        let mut out = Vec::with_capacity(index.len() * cols);
        for &(s, r) in index.iter() {
            let src = self.value(sources[s]);
            assert_eq!(src.cols(), cols, "gather column count");
            out.extend_from_slice(src.row(r));
        }
        self.push(
            Tensor::from_parts(vec![index.len(), cols], out),
            Op::GatherRows {
                sources: sources.to_vec(),
                index,
            },
        )
    }

    /// Output row `g` is the mean of the rows listed in `groups[g]`.
    pub fn group_mean(&mut self, x: Var, groups: Groups) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = vec![0.0; groups.len() * cols];
        for (gi, group) in groups.iter().enumerate() {
            let inv = 1.0 / group.len() as f64;
            let o = &mut out[gi * cols..(gi + 1) * cols];
            for &r in group {
                for (oo, v) in o.iter_mut().zip(xv.row(r)) {
                    *oo += v;
                }
            }
            for oo in o.iter_mut() {
                *oo *= inv;
            }
        }
        self.push(
            Tensor::from_parts(vec![groups.len(), cols], out),
            Op::GroupMean { x, groups },
        )
    }

    /// Mean over all rows, as a `1 x n` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let rows = self.value(x).rows();
        self.group_mean(x, Arc::new(vec![(0..rows).collect()]))
    }

    /// Row-wise `x / ||x||`. Zero rows yield non-finite values, which callers
    /// catch as a numerical failure.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = xv.data().to_vec();
        let mut norms = Vec::with_capacity(xv.rows());
        for row in out.chunks_mut(cols) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::NormalizeRows { x, norms },
        )
    }

    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = vec![0.0; xv.len()];
        for (o, row) in out.chunks_mut(cols).zip(xv.data().chunks(cols)) {
            softmax_into(row, temperature, o);
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::SoftmaxRows(x, temperature),
        )
    }

    pub fn log_softmax_rows(&mut self, x: Var, temperature: f64) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = vec![0.0; xv.len()];
        for (o, row) in out.chunks_mut(cols).zip(xv.data().chunks(cols)) {
            log_softmax_into(row, temperature, o);
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::LogSoftmaxRows(x, temperature),
        )
    }

    /// Elementwise natural log with the probability floor applied.
    pub fn log(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.max(PROB_FLOOR).ln()).collect();
        self.push(Tensor::from_parts(xv.shape().to_vec(), data), Op::Log(x))
    }

    /// Scalar `sum(x * weights)` for a constant weight tensor.
    pub fn dot_const(&mut self, x: Var, weights: Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), weights.len(), "dot length");
        let s = xv
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        self.push(Tensor::scalar(s), Op::Dot(x, weights))
    }

    /// Sum of scalar nodes.
    pub fn sum_scalars(&mut self, terms: &[Var]) -> Var {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t);
        }
        acc
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(
            self.value(output).len(),
            1,
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::filled(self.value(output).shape(), 1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let ga = grad_slot(grads, *a, av);
                gemm(
                    g.data(),
                    false,
                    bv.data(),
                    true,
                    m,
                    n,
                    k,
                    ga.data_mut(),
                    1.0,
                );
                let gb = grad_slot(grads, *b, bv);
                gemm(
                    av.data(),
                    true,
                    g.data(),
                    false,
                    k,
                    m,
                    n,
                    gb.data_mut(),
                    1.0,
                );
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    let slot = grad_slot(grads, v, self.value(v));
                    axpy(slot.data_mut(), g.data(), 1.0);
                }
            }
            Op::AddRow(x, bias) => {
                let slot = grad_slot(grads, *x, self.value(*x));
                axpy(slot.data_mut(), g.data(), 1.0);
                let n = g.cols();
                let gb = grad_slot(grads, *bias, self.value(*bias));
                for row in g.data().chunks(n) {
                    axpy(gb.data_mut(), row, 1.0);
                }
            }
            Op::Scale(x, alpha) => {
                let slot = grad_slot(grads, *x, self.value(*x));
                axpy(slot.data_mut(), g.data(), *alpha);
            }
            Op::Shift(x) => {
                let slot = grad_slot(grads, *x, self.value(*x));
                axpy(slot.data_mut(), g.data(), 1.0);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let slot = grad_slot(grads, *x, xv);
                for ((s, gi), xi) in slot.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                    *s += gi * gelu_grad(*xi);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = g.cols();
                let gam = self.value(*gamma).data().to_vec();
                {
                    let gg = grad_slot(grads, *gamma, self.value(*gamma));
                    for (grow, hrow) in g.data().chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg.data_mut()[j] += grow[j] * hrow[j];
                        }
                    }
                }
                {
                    let gb = grad_slot(grads, *beta, self.value(*beta));
                    for grow in g.data().chunks(n) {
                        axpy(gb.data_mut(), grow, 1.0);
                    }
                }
                let gx = grad_slot(grads, *x, self.value(*x));
                let mut dh = vec![0.0; n];
                for (r, (grow, hrow)) in g.data().chunks(n).zip(xhat.chunks(n)).enumerate() {
                    for j in 0..n {
                        dh[j] = grow[j] * gam[j];
                    }
                    let mean_dh = dh.iter().sum::<f64>() / n as f64;
                    let mean_dhh = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    let out = &mut gx.data_mut()[r * n..(r + 1) * n];
                    for j in 0..n {
                        out[j] += inv_std[r] * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, groups, probs, g, grads),
            Op::GatherRows { sources, index } => {
                let cols = g.cols();
                for (i, &(s, r)) in index.iter().enumerate() {
                    let src = sources[s];
                    let slot = grad_slot(grads, src, self.value(src));
                    axpy(
                        &mut slot.data_mut()[r * cols..(r + 1) * cols],
                        &g.data()[i * cols..(i + 1) * cols],
                        1.0,
                    );
                }
            }
            Op::GroupMean { x, groups } => {
                let cols = g.cols();
                let slot = grad_slot(grads, *x, self.value(*x));
                for (gi, group) in groups.iter().enumerate() {
                    let inv = 1.0 / group.len() as f64;
                    let grow = &g.data()[gi * cols..(gi + 1) * cols];
                    for &r in group {
                        axpy(&mut slot.data_mut()[r * cols..(r + 1) * cols], grow, inv);
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let cols = g.cols();
                let y = &node.value;
                let slot = grad_slot(grads, *x, self.value(*x));
                for (r, &n) in norms.iter().enumerate() {
                    let yr = y.row(r);
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let out = &mut slot.data_mut()[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        out[j] += (gr[j] - yr[j] * proj) / n;
                    }
                }
            }
            Op::SoftmaxRows(x, t) => {
                let cols = g.cols();
                let y = &node.value;
                let slot = grad_slot(grads, *x, self.value(*x));
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let out = &mut slot.data_mut()[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        out[j] += yr[j] * (gr[j] - s) / t;
                    }
                }
            }
            Op::LogSoftmaxRows(x, t) => {
                let cols = g.cols();
                let y = &node.value;
                let slot = grad_slot(grads, *x, self.value(*x));
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let s: f64 = gr.iter().sum();
                    let out = &mut slot.data_mut()[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        out[j] += (gr[j] - yr[j].exp() * s) / t;
                    }
                }
            }
            Op::Log(x) => {
                let xv = self.value(*x);
                let slot = grad_slot(grads, *x, xv);
                for ((s, gi), xi) in slot.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                    if *xi > PROB_FLOOR {
                        *s += gi / xi;
                    }
                }
            }
            Op::Dot(x, w) => {
                let slot = grad_slot(grads, *x, self.value(*x));
                axpy(slot.data_mut(), w.data(), g.data()[0]);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: &Groups,
        probs: &[Vec<f64>],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
        let mut pi = 0;
        for group in groups.iter() {
            let gsz = group.len();
            let mut dp = vec![0.0; gsz];
            for h in 0..heads {
                let off = h * dh;
                let p = &probs[pi];
                pi += 1;
                for (i, &ri) in group.iter().enumerate() {
                    let go = &gd[ri * d + off..ri * d + off + dh];
                    let prow = &p[i * gsz..(i + 1) * gsz];
                    for (j, &rj) in group.iter().enumerate() {
                        let vj = &vd[rj * d + off..rj * d + off + dh];
                        dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                        let dvj = &mut dv[rj * d + off..rj * d + off + dh];
                        for (x, y) in dvj.iter_mut().zip(go) {
                            *x += prow[j] * y;
                        }
                    }
                    let s: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for (j, &rj) in group.iter().enumerate() {
                        let ds = prow[j] * (dp[j] - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for c in 0..dh {
                            dq[ri * d + off + c] += ds * kd[rj * d + off + c];
                            dk[rj * d + off + c] += ds * qd[ri * d + off + c];
                        }
                    }
                }
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            let slot = grad_slot(grads, var, self.value(var));
            axpy(slot.data_mut(), &delta, 1.0);
        }
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, like: &Tensor) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.shape()))
}

fn axpy(y: &mut [f64], x: &[f64], alpha: f64) {
    for (a, b) in y.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
