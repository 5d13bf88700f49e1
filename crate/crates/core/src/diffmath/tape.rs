//! Reverse-mode tape over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and whatever the
//! backward pass needs. Nodes are stored in execution order, so walking the
//! arena backwards is a valid reverse topological order.

use super::tensor::{dot, matmul_into, matmul_nt_acc, matmul_tn_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
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
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Concat { parts: Vec<Var>, axis: usize },
    Softmax { x: Var, axis: usize },
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    MaxOverSet { inputs: Vec<Var>, argmax: Vec<usize> },
    Mul(Var, Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Computation tape. Single-threaded; independent tapes may live on
/// independent threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// `(outer, axis_len, inner)` strides for reducing along `axis`.
fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Registers a differentiable leaf (a parameter or checked input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a constant: gradients are never propagated into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).require_2d("matmul")?;
        let (k2, n) = self.value(b).require_2d("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), needs))
    }

    /// Elementwise sum of equal shapes, or a matrix plus a bias vector
    /// broadcast over rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let needs = self.needs(&[a, b]);
        if sa == sb {
            let data: Vec<f64> = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect();
            return Ok(self.push(Tensor::new(sa, data)?, Op::Add(a, b), needs));
        }
        let is_vector = sb.len() == 1 || (sb.len() == 2 && sb[0] == 1);
        if sa.len() == 2 && is_vector && self.value(b).len() == sa[1] {
            let bias = self.value(b).data();
            let mut data = self.value(a).data().to_vec();
            for row in data.chunks_mut(sa[1]) {
                for (x, y) in row.iter_mut().zip(bias) {
                    *x += y;
                }
            }
            return Ok(self.push(Tensor::new(sa, data)?, Op::AddBias(a, b), needs));
        }
        Err(Error::shape("add", format!("{sa:?} + {sb:?}")))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", s, base),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_strides(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let n = self.shape(*p)[axis] * inner;
                data.extend_from_slice(&self.value(*p).data()[o * n..(o + 1) * n]);
            }
        }
        let needs = self.needs(parts);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// Softmax along `axis`. Entries equal to `-inf` receive zero mass.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, n, inner) = axis_strides(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[idx(j)] /= total;
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Scale(x, factor), needs))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| sigmoid(v)).collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Sigmoid(x), needs))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Relu(x), needs))
    }

    /// Normalizes each row of a 2-D input, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, d) = self.value(x).require_2d("layer_norm")?;
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "width {d} with gain {:?} and bias {:?}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * d];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for r in 0..m {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = s;
            for c in 0..d {
                let h = (row[c] - mean) * s;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let needs = self.needs(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(vec![m, d], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Gathers rows of `table` (`V×d`) by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).require_2d("embedding")?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { id, vocab: v });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let needs = self.needs(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Elementwise maximum across same-shaped inputs. Ties resolve to the
    /// lowest input index, which also receives the gradient.
    pub fn max_over_set(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("max_over_set", "no inputs"))?;
        let shape = self.shape(*first).to_vec();
        for v in inputs {
            if self.shape(*v) != shape.as_slice() {
                return Err(Error::shape(
                    "max_over_set",
                    format!("{:?} vs {:?}", self.shape(*v), shape),
                ));
            }
        }
        let mut out = self.value(*first).data().to_vec();
        let mut argmax = vec![0usize; out.len()];
        for (k, v) in inputs.iter().enumerate().skip(1) {
            for (i, &x) in self.value(*v).data().iter().enumerate() {
                if x > out[i] {
                    out[i] = x;
                    argmax[i] = k;
                }
            }
        }
        let needs = self.needs(inputs);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MaxOverSet {
                inputs: inputs.to_vec(),
                argmax,
            },
            needs,
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "elementwise_mul",
                format!("{:?} * {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), needs))
    }

    /// Weighted sum of row-wise negative log-likelihoods:
    /// `Σ_i w_i · (logsumexp(z_i) − z_i[t_i])`. Returns a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (m, v) = self.value(logits).require_2d("cross_entropy")?;
        if targets.len() != m || weights.len() != m {
            return Err(Error::shape(
                "cross_entropy",
                format!(
                    "{m} rows with {} targets and {} weights",
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; m * v];
        let mut loss = 0.0;
        for r in 0..m {
            let t = targets[r];
            if t >= v {
                return Err(Error::TokenOutOfRange { id: t, vocab: v });
            }
            let row = &z[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for c in 0..v {
                let e = (row[c] - max).exp();
                probs[r * v + c] = e;
                total += e;
            }
            for c in 0..v {
                probs[r * v + c] /= total;
            }
            let lse = max + total.ln();
            loss += weights[r] * (lse - row[t]);
        }
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            needs,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).require_2d("transpose")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x), needs))
    }

    /// Columns `start..end` of a 2-D input.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(x).require_2d("slice_cols")?;
        if start > end || end > n {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {n} columns")));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![m, w], out)?, Op::SliceCols { x, start }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), needs))
    }

    /// Accumulates `d loss / d node` for every node reachable from `loss`.
    /// Gradients land in the grad slot of each differentiable leaf;
    /// previous leaf gradients are replaced.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                *self.nodes[i].value.grad_mut() = g;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$acc:ident| $body:block) => {
                if let Some($acc) = grad_slot(nodes, grads, $v) $body
            };
        }
        let val = |v: Var| &nodes[v.0].value;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                with_grad!(*a, |acc| {
                    matmul_nt_acc(g, val(*b).data(), acc, m, k, n);
                });
                with_grad!(*b, |acc| {
                    matmul_tn_acc(val(*a).data(), g, acc, m, k, n);
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    with_grad!(v, |acc| {
                        for (x, y) in acc.iter_mut().zip(g) {
                            *x += y;
                        }
                    });
                }
            }
            Op::AddBias(a, b) => {
                with_grad!(*a, |acc| {
                    for (x, y) in acc.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                let n = val(*b).len();
                with_grad!(*b, |acc| {
                    for row in g.chunks(n) {
                        for (x, y) in acc.iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_strides(out.shape(), *axis);
                let total = out.len() / outer.max(1);
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).shape()[*axis] * inner;
                    with_grad!(*p, |acc| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + n];
                            for (x, y) in acc[o * n..(o + 1) * n].iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                    });
                    offset += n;
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_strides(out.shape(), *axis);
                let y = out.data();
                with_grad!(*x, |acc| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + ii;
                            let s: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..n {
                                acc[idx(j)] += y[idx(j)] * (g[idx(j)] - s);
                            }
                        }
                    }
                });
            }
            Op::Scale(x, f) => {
                with_grad!(*x, |acc| {
                    for (a, y) in acc.iter_mut().zip(g) {
                        *a += y * f;
                    }
                });
            }
            Op::Sigmoid(x) => {
                with_grad!(*x, |acc| {
                    for ((a, y), s) in acc.iter_mut().zip(g).zip(out.data()) {
                        *a += y * s * (1.0 - s);
                    }
                });
            }
            Op::Relu(x) => {
                let input = val(*x).data();
                with_grad!(*x, |acc| {
                    for ((a, y), v) in acc.iter_mut().zip(g).zip(input) {
                        if *v > 0.0 {
                            *a += y;
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
                let d = val(*gain).len();
                let m = rstd.len();
                let gv = val(*gain).data();
                with_grad!(*gain, |acc| {
                    for r in 0..m {
                        for c in 0..d {
                            acc[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                });
                with_grad!(*bias, |acc| {
                    for r in 0..m {
                        for c in 0..d {
                            acc[c] += g[r * d + c];
                        }
                    }
                });
                with_grad!(*x, |acc| {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..m {
                        let h = &xhat[r * d..(r + 1) * d];
                        for c in 0..d {
                            dxhat[c] = g[r * d + c] * gv[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh = dot(&dxhat, h) / d as f64;
                        for c in 0..d {
                            acc[r * d + c] += rstd[r] * (dxhat[c] - mean_d - h[c] * mean_dh);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = val(*table).cols();
                with_grad!(*table, |acc| {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            acc[id * d + c] += g[r * d + c];
                        }
                    }
                });
            }
            Op::MaxOverSet { inputs, argmax } => {
                for (k, v) in inputs.iter().enumerate() {
                    with_grad!(*v, |acc| {
                        for (e, &winner) in argmax.iter().enumerate() {
                            if winner == k {
                                acc[e] += g[e];
                            }
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                with_grad!(*a, |acc| {
                    for e in 0..acc.len() {
                        acc[e] += g[e] * bv[e];
                    }
                });
                with_grad!(*b, |acc| {
                    for e in 0..acc.len() {
                        acc[e] += g[e] * av[e];
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let v = val(*logits).cols();
                let up = g[0];
                with_grad!(*logits, |acc| {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let scale = up * w;
                        for c in 0..v {
                            acc[r * v + c] += scale * probs[r * v + c];
                        }
                        acc[r * v + t] -= scale;
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = (val(*x).rows(), val(*x).cols());
                with_grad!(*x, |acc| {
                    for a in 0..m {
                        for b in 0..n {
                            acc[a * n + b] += g[b * m + a];
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let n = val(*x).cols();
                let w = out.cols();
                with_grad!(*x, |acc| {
                    for r in 0..out.rows() {
                        for c in 0..w {
                            acc[r * n + start + c] += g[r * w + c];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                with_grad!(*x, |acc| {
                    for a in acc.iter_mut() {
                        *a += g[0];
                    }
                });
            }
        }
    }
}

fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
