//! Reverse-mode differentiation over a recorded graph of matrix operations.
//!
//! Every builder method evaluates its result eagerly and appends a node to
//! the tape. [`Graph::backward`] walks the tape in reverse and accumulates
//! gradients for every node that depends on a parameter. Constants never
//! receive gradients, which keeps frozen inputs cheap.

use indexmap::IndexMap;

use super::matrix::{matmul_acc, matmul_nt_acc, matmul_tn_acc, sigmoid, Matrix};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside the loss.
pub const BCE_EPS: f64 = 1e-12;
const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    AddScalar(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Conv2dSame(NodeId, NodeId),
    Bce { probs: NodeId, labels: Matrix },
    Softmax(NodeId),
    CrossEntropy { logits: NodeId, targets: Vec<usize> },
    LayerNorm { input: NodeId, inv_std: Vec<f64> },
    Gather { table: NodeId, ids: Vec<usize> },
    ConcatCols(Vec<NodeId>),
    SliceRows { input: NodeId, start: usize },
    Sum(NodeId),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// A tape of evaluated operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: IndexMap<String, NodeId>,
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// First entry of a node's value; meant for 1x1 loss nodes.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn grad_any(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn unary(&mut self, a: NodeId, value: Matrix, op: Op) -> NodeId {
        let g = self.grad_any(&[a]);
        self.push(value, op, g)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, value: Matrix, op: Op) -> NodeId {
        let g = self.grad_any(&[a, b]);
        self.push(value, op, g)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a trainable parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?
            .clone();
        let id = self.push(value, Op::Leaf, true);
        self.params.insert(name.to_owned(), id);
        Ok(id)
    }

    /// Binds a parameter's current value as a constant (no gradient).
    pub fn frozen(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let value = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?
            .clone();
        Ok(self.constant(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(a, b, v, Op::MatMul(a, b)))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.binary(a, b, v, Op::MatMulT(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.unary(a, v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Mul(a, b)))
    }

    fn check_row(&self, a: NodeId, row: NodeId, what: &str) -> Result<()> {
        let (ra, ca) = self.value(a).shape();
        let shape = self.value(row).shape();
        if shape != (1, ca) {
            return Err(Error::Shape(format!("{what}: {shape:?} row for {ra}x{ca} input")));
        }
        Ok(())
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check_row(a, bias, "add_row")?;
        let mut v = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for i in 0..v.rows() {
            for (x, y) in v.row_mut(i).iter_mut().zip(&b) {
                *x += y;
            }
        }
        Ok(self.binary(a, bias, v, Op::AddRow(a, bias)))
    }

    /// Multiplies every row of `a` entrywise by a `1 x cols` row.
    pub fn mul_row(&mut self, a: NodeId, gain: NodeId) -> Result<NodeId> {
        self.check_row(a, gain, "mul_row")?;
        let mut v = self.value(a).clone();
        let b = self.value(gain).data().to_vec();
        for i in 0..v.rows() {
            for (x, y) in v.row_mut(i).iter_mut().zip(&b) {
                *x *= y;
            }
        }
        Ok(self.binary(a, gain, v, Op::MulRow(a, gain)))
    }

    /// Adds a 1x1 node to every entry of `a`.
    pub fn add_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).shape() != (1, 1) {
            return Err(Error::Shape(format!("add_scalar: {:?} is not 1x1", self.value(s).shape())));
        }
        let s_val = self.scalar(s);
        let v = self.value(a).map(|x| x + s_val);
        Ok(self.binary(a, s, v, Op::AddScalar(a, s)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.unary(a, v, Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.unary(a, v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.unary(a, v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.unary(a, v, Op::Relu(a))
    }

    /// Same-shape 2-D cross-correlation with zero padding; the kernel is not flipped.
    pub fn conv2d_same(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId> {
        let v = conv2d_same(self.value(input), self.value(kernel))?;
        Ok(self.binary(input, kernel, v, Op::Conv2dSame(input, kernel)))
    }

    /// Summed binary cross entropy of `probs` against 0/1 `labels`.
    pub fn bce(&mut self, probs: NodeId, labels: Matrix) -> Result<NodeId> {
        let loss = bce_loss(self.value(probs), &labels)?;
        Ok(self.unary(probs, Matrix::scalar(loss), Op::Bce { probs, labels }))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a), false);
        self.unary(a, v, Op::Softmax(a))
    }

    /// Row-wise softmax where row `i` only sees columns `0..=i`.
    pub fn causal_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a), true);
        self.unary(a, v, Op::Softmax(a))
    }

    /// Summed softmax cross entropy of each logit row against its target id.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let l = self.value(logits);
        if l.rows() != targets.len() {
            return Err(Error::Shape(format!(
                "cross_entropy: {} logit rows for {} targets",
                l.rows(),
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= l.cols()) {
            return Err(Error::Shape(format!("cross_entropy: target {t} >= {} classes", l.cols())));
        }
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = l.row(i);
            loss += log_sum_exp(row) - row[t];
        }
        Ok(self.unary(
            logits,
            Matrix::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let cols = x.cols();
        let mut out = Matrix::zeros(x.rows(), cols);
        let mut inv_std = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.unary(a, out, Op::LayerNorm { input: a, inv_std })
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::Shape(format!("gather: id {bad} >= {} rows", t.rows())));
        }
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        Ok(self.unary(
            table,
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::Shape("concat_cols: no inputs".into()))?;
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(i);
                out.row_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let g = self.grad_any(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), g))
    }

    /// Rows `[start, end)` of `a`.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        if start > end || end > self.value(a).rows() {
            return Err(Error::Shape(format!(
                "slice_rows {start}..{end} of {} rows",
                self.value(a).rows()
            )));
        }
        let v = self.value(a).slice_rows(start, end);
        Ok(self.unary(a, v, Op::SliceRows { input: a, start }))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::scalar(self.value(a).sum());
        self.unary(a, v, Op::Sum(a))
    }

    /// Gradients of every node with respect to the entries of `root`
    /// (seeded with ones, so a 1x1 root gives the usual gradient).
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let (r, c) = self.value(root).shape();
        grads[root.0] = Some(Matrix::filled(r, c, 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let want = |id: NodeId| self.nodes[id.0].needs_grad;
        let mut acc = |id: NodeId, f: &dyn Fn(&mut Matrix)| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| {
                let (r, c) = self.nodes[id.0].value.shape();
                Matrix::zeros(r, c)
            });
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if want(*a) {
                    acc(*a, &|ga| matmul_nt_acc(g, val(*b), ga));
                }
                if want(*b) {
                    acc(*b, &|gb| matmul_tn_acc(val(*a), g, gb));
                }
            }
            Op::MatMulT(a, b) => {
                if want(*a) {
                    acc(*a, &|ga| matmul_acc(g, val(*b), ga));
                }
                if want(*b) {
                    acc(*b, &|gb| matmul_tn_acc(g, val(*a), gb));
                }
            }
            Op::Transpose(a) => acc(*a, &|ga| ga.add_assign(&g.transpose())),
            Op::Add(a, b) => {
                acc(*a, &|ga| ga.add_assign(g));
                acc(*b, &|gb| gb.add_assign(g));
            }
            Op::AddRow(a, bias) => {
                acc(*a, &|ga| ga.add_assign(g));
                acc(*bias, &|gb| {
                    for i in 0..g.rows() {
                        for (o, x) in gb.data_mut().iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                });
            }
            Op::MulRow(a, gain) => {
                let w = val(*gain).data();
                acc(*a, &|ga| {
                    for i in 0..g.rows() {
                        let gi = g.row(i);
                        for ((o, x), wk) in ga.row_mut(i).iter_mut().zip(gi).zip(w) {
                            *o += x * wk;
                        }
                    }
                });
                acc(*gain, &|gw| {
                    let av = val(*a);
                    for i in 0..g.rows() {
                        for ((o, x), y) in gw.data_mut().iter_mut().zip(g.row(i)).zip(av.row(i)) {
                            *o += x * y;
                        }
                    }
                });
            }
            Op::AddScalar(a, s) => {
                acc(*a, &|ga| ga.add_assign(g));
                acc(*s, &|gs| gs.data_mut()[0] += g.sum());
            }
            Op::Mul(a, b) => {
                acc(*a, &|ga| ga.add_assign(&g.hadamard(val(*b)).expect("shape")));
                acc(*b, &|gb| gb.add_assign(&g.hadamard(val(*a)).expect("shape")));
            }
            Op::Scale(a, s) => acc(*a, &|ga| ga.add_assign(&g.scale(*s))),
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, &|ga| {
                    for ((o, gk), yk) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gk * (1.0 - yk * yk);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, &|ga| {
                    for ((o, gk), yk) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gk * yk * (1.0 - yk);
                    }
                });
            }
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &|ga| {
                    for ((o, gk), xk) in ga.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        if *xk > 0.0 {
                            *o += gk;
                        }
                    }
                });
            }
            Op::Conv2dSame(input, kernel) => {
                let (x, k) = (val(*input), val(*kernel));
                acc(*input, &|gx| conv2d_same_grad_input(g, k, gx));
                acc(*kernel, &|gk| conv2d_same_grad_kernel(g, x, gk));
            }
            Op::Bce { probs, labels } => {
                let scale = g.data()[0];
                let p = val(*probs);
                acc(*probs, &|gp| {
                    for ((o, &pk), &yk) in gp.data_mut().iter_mut().zip(p.data()).zip(labels.data()) {
                        let pc = pk.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        *o += scale * (-yk / pc + (1.0 - yk) / (1.0 - pc));
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &node.value;
                acc(*a, &|ga| {
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dotp: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yk), gk) in ga.row_mut(i).iter_mut().zip(yr).zip(gr) {
                            *o += yk * (gk - dotp);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let scale = g.data()[0];
                let l = val(*logits);
                acc(*logits, &|gl| {
                    for (i, &t) in targets.iter().enumerate() {
                        let row = l.row(i);
                        let lse = log_sum_exp(row);
                        for (k, (o, x)) in gl.row_mut(i).iter_mut().zip(row).enumerate() {
                            let p = (x - lse).exp();
                            *o += scale * (p - if k == t { 1.0 } else { 0.0 });
                        }
                    }
                });
            }
            Op::LayerNorm { input, inv_std } => {
                let y = &node.value;
                acc(*input, &|gx| {
                    let n = y.cols() as f64;
                    for (i, inv) in inv_std.iter().enumerate() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((o, gk), yk) in gx.row_mut(i).iter_mut().zip(gr).zip(yr) {
                            *o += inv * (gk - mean_g - yk * mean_gy);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => acc(*table, &|gt| {
                for (r, &id) in ids.iter().enumerate() {
                    for (o, x) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    acc(p, &|gp| {
                        for i in 0..g.rows() {
                            for (o, x) in gp.row_mut(i).iter_mut().zip(&g.row(i)[off..off + w]) {
                                *o += x;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::SliceRows { input, start } => acc(*input, &|gx| {
                for i in 0..g.rows() {
                    for (o, x) in gx.row_mut(start + i).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
            }),
            Op::Sum(a) => {
                let s = g.data()[0];
                acc(*a, &|ga| ga.data_mut().iter_mut().for_each(|o| *o += s));
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: IndexMap<String, NodeId>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of every bound parameter that the root depends on.
    pub fn params(&self) -> IndexMap<String, Matrix> {
        self.params
            .iter()
            .filter_map(|(name, id)| self.grads[id.0].clone().map(|g| (name.clone(), g)))
            .collect()
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_rows(x: &Matrix, causal: bool) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let limit = if causal { (i + 1).min(x.cols()) } else { x.cols() };
        let row = &x.row(i)[..limit];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        let o = out.row_mut(i);
        for (k, v) in row.iter().enumerate() {
            o[k] = (v - m).exp();
            z += o[k];
        }
        for v in &mut o[..limit] {
            *v /= z;
        }
    }
    out
}

fn check_kernel(kernel: &Matrix) -> Result<usize> {
    let (kr, kc) = kernel.shape();
    if kr != kc || kr % 2 == 0 {
        return Err(Error::Shape(format!("convolution kernel must be odd and square, got {kr}x{kc}")));
    }
    Ok(kr / 2)
}

/// `out[i][j] = sum_{a,b} k[a][b] * x[i + a - c][j + b - c]`, zero outside `x`.
pub fn conv2d_same(x: &Matrix, kernel: &Matrix) -> Result<Matrix> {
    let c = check_kernel(kernel)? as isize;
    let (n, m) = x.shape();
    let k = kernel.rows() as isize;
    let mut out = Matrix::zeros(n, m);
    for i in 0..n as isize {
        for j in 0..m as isize {
            let mut s = 0.0;
            for a in 0..k {
                let ii = i + a - c;
                if ii < 0 || ii >= n as isize {
                    continue;
                }
                for b in 0..k {
                    let jj = j + b - c;
                    if jj < 0 || jj >= m as isize {
                        continue;
                    }
                    s += kernel.get(a as usize, b as usize) * x.get(ii as usize, jj as usize);
                }
            }
            out.set(i as usize, j as usize, s);
        }
    }
    Ok(out)
}

fn conv_taps(n: usize, m: usize, k: usize, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
    let c = (k / 2) as isize;
    for i in 0..n as isize {
        for j in 0..m as isize {
            for a in 0..k as isize {
                let ii = i + a - c;
                if ii < 0 || ii >= n as isize {
                    continue;
                }
                for b in 0..k as isize {
                    let jj = j + b - c;
                    if jj < 0 || jj >= m as isize {
                        continue;
                    }
                    f(i as usize, j as usize, a as usize, b as usize, ii as usize, jj as usize);
                }
            }
        }
    }
}

fn conv2d_same_grad_input(g: &Matrix, kernel: &Matrix, gx: &mut Matrix) {
    let (n, m) = g.shape();
    conv_taps(n, m, kernel.rows(), |i, j, a, b, ii, jj| {
        let v = gx.get(ii, jj) + kernel.get(a, b) * g.get(i, j);
        gx.set(ii, jj, v);
    });
}

fn conv2d_same_grad_kernel(g: &Matrix, x: &Matrix, gk: &mut Matrix) {
    let (n, m) = g.shape();
    conv_taps(n, m, gk.rows(), |i, j, a, b, ii, jj| {
        let v = gk.get(a, b) + x.get(ii, jj) * g.get(i, j);
        gk.set(a, b, v);
    });
}

/// `sum -[y ln p + (1 - y) ln(1 - p)]` with `p` clamped to `[BCE_EPS, 1 - BCE_EPS]`.
pub fn bce_loss(probs: &Matrix, labels: &Matrix) -> Result<f64> {
    if probs.shape() != labels.shape() {
        return Err(Error::Shape(format!(
            "bce: probs {:?} vs labels {:?}",
            probs.shape(),
            labels.shape()
        )));
    }
    if let Some(y) = labels.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::invalid(format!("bce label {y} is not 0 or 1")));
    }
    Ok(probs
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_grad(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-5;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[k] += h;
            let mut xm = x.clone();
            xm.data_mut()[k] -= h;
            out.data_mut()[k] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() / x.abs().max(1.0))
            .fold(0.0, f64::max)
    }

    fn pseudo(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Matrix::from_fn(rows, cols, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    fn store_with(entries: &[(&str, Matrix)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, m) in entries {
            s.insert(n, m.clone()).unwrap();
        }
        s
    }

    #[test]
    fn matmul_sum_gradient_is_row_broadcast_of_b_row_sums() {
        let a = pseudo(2, 3, 1);
        let b = pseudo(3, 4, 2);
        let store = store_with(&[("a", a.clone()), ("b", b.clone())]);
        let mut g = Graph::new();
        let (na, nb) = (g.param(&store, "a").unwrap(), g.param(&store, "b").unwrap());
        let p = g.matmul(na, nb).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss);
        let ga = grads.wrt(na).unwrap();
        for i in 0..2 {
            for k in 0..3 {
                let row_sum: f64 = b.row(k).iter().sum();
                assert!((ga.get(i, k) - row_sum).abs() < 1e-12);
            }
        }
        let fd = fd_grad(&a, |x| x.matmul(&b).unwrap().sum());
        assert!(rel_err(ga, &fd) < 1e-8);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut k = Matrix::zeros(3, 3);
        k.set(1, 1, 1.0);
        for (r, c) in [(1, 1), (1, 5), (4, 1), (3, 7)] {
            let x = pseudo(r, c, 9);
            assert_eq!(conv2d_same(&x, &k).unwrap(), x);
        }
    }

    #[test]
    fn conv_windowed_sum() {
        // Each output cell of a 2x2 input sees all four inputs through a 3x3 window.
        let out = conv2d_same(&Matrix::filled(2, 2, 1.0), &Matrix::filled(3, 3, 1.0)).unwrap();
        assert_eq!(out, Matrix::filled(2, 2, 4.0));
        let out = conv2d_same(&Matrix::filled(3, 3, 1.0), &Matrix::filled(3, 3, 1.0)).unwrap();
        assert_eq!(out.get(1, 1), 9.0);
        assert_eq!(out.get(0, 0), 4.0);
        assert_eq!(out.get(0, 1), 6.0);
    }

    #[test]
    fn conv_is_cross_correlation() {
        let x = Matrix::from_rows(&[[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]);
        let mut k = Matrix::zeros(3, 3);
        k.set(0, 0, 1.0);
        // out[i][j] reads x[i-1][j-1], so the impulse moves down-right.
        let out = conv2d_same(&x, &k).unwrap();
        assert_eq!(out.get(2, 2), 1.0);
        assert_eq!(out.get(0, 0), 0.0);
    }

    #[test]
    fn conv_rejects_even_kernel() {
        assert!(conv2d_same(&Matrix::zeros(2, 2), &Matrix::zeros(2, 2)).is_err());
        assert!(conv2d_same(&Matrix::zeros(2, 2), &Matrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let x = pseudo(4, 5, 3);
        let k = pseudo(3, 3, 4);
        let w = pseudo(4, 5, 5);
        let store = store_with(&[("x", x.clone()), ("k", k.clone())]);
        let mut g = Graph::new();
        let (nx, nk) = (g.param(&store, "x").unwrap(), g.param(&store, "k").unwrap());
        let c = g.conv2d_same(nx, nk).unwrap();
        let wn = g.constant(w.clone());
        let p = g.mul(c, wn).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss);
        let f = |x: &Matrix, k: &Matrix| conv2d_same(x, k).unwrap().hadamard(&w).unwrap().sum();
        assert!(rel_err(grads.wrt(nk).unwrap(), &fd_grad(&k, |kk| f(&x, kk))) < 1e-4);
        assert!(rel_err(grads.wrt(nx).unwrap(), &fd_grad(&x, |xx| f(xx, &k))) < 1e-4);
    }

    #[test]
    fn elementwise_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(0.0f64.tanh(), 0.0);
        let x = pseudo(5, 5, 11).scale(8.0);
        let s = x.map(sigmoid).add(&x.map(|v| sigmoid(-v))).unwrap();
        assert!(s.data().iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn bce_values() {
        let half = Matrix::filled(3, 4, 0.5);
        let labels = Matrix::from_fn(3, 4, |i, j| ((i + j) % 2) as f64);
        let loss = bce_loss(&half, &labels).unwrap();
        assert!((loss - 12.0 * std::f64::consts::LN_2).abs() < 1e-12);

        let perfect = bce_loss(&labels, &labels).unwrap();
        assert!(perfect <= 12.0 * (1.0 / (1.0 - BCE_EPS)).ln() + 1e-15);

        let p = Matrix::from_rows(&[[0.9, 0.1], [0.2, 0.8]]);
        let y = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let expected = -(0.9f64.ln() * 2.0 + 0.8f64.ln() * 2.0);
        let loss = bce_loss(&p, &y).unwrap();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.6570).abs() < 1e-4);

        assert!(bce_loss(&p, &Matrix::filled(2, 2, 0.5)).is_err());
        assert!(bce_loss(&p, &Matrix::filled(1, 2, 1.0)).is_err());
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        // tanh, sigmoid, relu, softmax, layer norm, cross entropy, gather,
        // concat, slices and row broadcasts in one expression.
        let x = pseudo(3, 4, 21);
        let bias = pseudo(1, 4, 22);
        let gain = pseudo(1, 4, 23);
        let table = pseudo(5, 4, 24);
        let build = |g: &mut Graph, store: &ParamStore| -> NodeId {
            let x = g.param(store, "x").unwrap();
            let b = g.param(store, "bias").unwrap();
            let w = g.param(store, "gain").unwrap();
            let t = g.param(store, "table").unwrap();
            let e = g.gather(t, &[4, 0, 2]).unwrap();
            let h = g.add(x, e).unwrap();
            let h = g.layer_norm(h);
            let h = g.mul_row(h, w).unwrap();
            let h = g.add_row(h, b).unwrap();
            let a = g.tanh(h);
            let s = g.sigmoid(h);
            let r = g.relu(h);
            let cat = g.concat_cols(&[a, s]).unwrap();
            let att = g.matmul_t(cat, cat).unwrap();
            let att = g.causal_softmax_rows(att);
            let mixed = g.matmul(att, r).unwrap();
            let top = g.slice_rows(mixed, 1, 3).unwrap();
            let ce = g.cross_entropy(top, &[3, 1]).unwrap();
            let sm = g.softmax_rows(x);
            let tr = g.transpose(sm);
            let extra = g.sum(tr);
            let extra = g.scale(extra, 0.3);
            g.add(ce, extra).unwrap()
        };
        let mut store = store_with(&[("x", x), ("bias", bias), ("gain", gain), ("table", table)]);
        let err = crate::numerics::grad_check(&mut store, |g, s| Ok(build(g, s))).unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn constants_get_no_gradient() {
        let store = store_with(&[("w", pseudo(2, 2, 1))]);
        let mut g = Graph::new();
        let c = g.constant(pseudo(2, 2, 2));
        let w = g.param(&store, "w").unwrap();
        let p = g.matmul(c, w).unwrap();
        let l = g.sum(p);
        let grads = g.backward(l);
        assert!(grads.wrt(c).is_none());
        assert!(grads.wrt(w).is_some());
        assert_eq!(grads.params().len(), 1);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let y = softmax_rows(&pseudo(3, 3, 5), true);
        assert_eq!(y.get(0, 1), 0.0);
        assert_eq!(y.get(1, 2), 0.0);
        for i in 0..3 {
            assert!((y.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
