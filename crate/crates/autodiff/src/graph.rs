//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, so the
//! node list is already a topological order. [`Graph::backward`] walks it in
//! reverse and accumulates gradients into the leaves created with
//! [`Graph::leaf`]. Calling `backward` twice without [`Graph::zero_grad`]
//! adds the gradients twice. Intermediate gradients are dropped once their
//! parents have been updated.

use crate::error::{AutodiffError, Result};
use crate::kernels;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this crate.
///
/// The forward value is computed by the caller and handed to
/// [`Graph::custom`]; `backward` must return one gradient per input, shaped
/// like that input.
pub trait CustomOp {
    fn name(&self) -> &str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    MulScalar(NodeId, NodeId),
    Exp(NodeId),
    Gelu(NodeId),
    Tanh(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2NormalizeRows {
        x: NodeId,
        norms: Vec<f64>,
    },
    CrossEntropyDiag {
        x: NodeId,
        probs: Vec<f64>,
    },
    Mse(NodeId, NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    Sum(NodeId),
    Mean(NodeId),
    Custom {
        inputs: Vec<NodeId>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&v| f(v)).collect();
    Tensor::new(t.rows(), t.cols(), data).expect("same length")
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.nodes[id.0].requires_grad)
    }

    /// A differentiable leaf; its gradient is kept after `backward`.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` has reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(shape_err("matmul", va, vb));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let out = Tensor::new(m, n, kernels::matmul(va.data(), vb.data(), m, k, n))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).transpose();
        let rg = self.needs(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va, vb));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.rows(), va.cols(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.elementwise("add", a, b, |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.elementwise("sub", a, b, |x, y| x - y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(shape_err("add_row", va, vr));
        }
        let n = va.cols();
        let mut data = va.data().to_vec();
        if n > 0 {
            for chunk in data.chunks_mut(n) {
                for (o, b) in chunk.iter_mut().zip(vr.data()) {
                    *o += b;
                }
            }
        }
        let out = Tensor::new(va.rows(), n, data)?;
        let rg = self.needs(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let out = map(self.value(a), |v| v * factor);
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    /// Multiplies every element of `a` by the single value held in `s`.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let factor = self.value(s).item()?;
        let out = map(self.value(a), |v| v * factor);
        let rg = self.needs(&[a, s]);
        Ok(self.push(out, Op::MulScalar(a, s), rg))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let out = map(self.value(a), f64::exp);
        let rg = self.needs(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out = map(self.value(a), kernels::gelu);
        let rg = self.needs(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = map(self.value(a), f64::tanh);
        let rg = self.needs(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let data = kernels::softmax_rows(v.data(), v.rows(), v.cols());
        let out = Tensor::new(v.rows(), v.cols(), data).expect("same shape");
        let rg = self.needs(&[a]);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Per-row normalization to zero mean and unit (population) variance,
    /// followed by an elementwise affine map with `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let n = vx.cols();
        if vg.shape() != [1, n] {
            return Err(shape_err("layer_norm", vx, vg));
        }
        if vb.shape() != [1, n] {
            return Err(shape_err("layer_norm", vx, vb));
        }
        let mut xhat = vec![0.0; vx.len()];
        let mut inv_std = vec![0.0; vx.rows()];
        let mut out = vec![0.0; vx.len()];
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * vg.data()[c] + vb.data()[c];
            }
        }
        let out = Tensor::new(vx.rows(), n, out)?;
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Scales each row to unit Euclidean norm; all-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let n = v.cols();
        let mut norms = vec![0.0; v.rows()];
        let mut out = v.data().to_vec();
        for r in 0..v.rows() {
            let norm = v.row(r).iter().map(|a| a * a).sum::<f64>().sqrt();
            norms[r] = norm;
            if norm > 0.0 {
                for o in &mut out[r * n..(r + 1) * n] {
                    *o /= norm;
                }
            }
        }
        let out = Tensor::new(v.rows(), n, out).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(out, Op::L2NormalizeRows { x, norms }, rg)
    }

    /// Mean over rows of `-log softmax(row_i)[i]`: cross-entropy of a square
    /// logit matrix against identity targets.
    pub fn cross_entropy_diag(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.rows() != v.cols() {
            return Err(AutodiffError::NotSquare { shape: v.shape() });
        }
        let n = v.rows();
        if n == 0 {
            return Err(AutodiffError::InvalidArgument(
                "cross_entropy_diag on an empty matrix".into(),
            ));
        }
        let probs = kernels::softmax_rows(v.data(), n, n);
        let loss = (0..n)
            .map(|i| kernels::log_sum_exp(v.row(i)) - v.get(i, i))
            .sum::<f64>()
            / n as f64;
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropyDiag { x, probs }, rg))
    }

    /// Mean of squared differences over all entries.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (vp, vt) = (self.value(pred), self.value(target));
        if vp.shape() != vt.shape() {
            return Err(shape_err("mse", vp, vt));
        }
        if vp.is_empty() {
            return Err(AutodiffError::InvalidArgument("mse on empty tensors".into()));
        }
        let loss = vp
            .data()
            .iter()
            .zip(vt.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / vp.len() as f64;
        let rg = self.needs(&[pred, target]);
        Ok(self.push(Tensor::scalar(loss), Op::Mse(pred, target), rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| AutodiffError::InvalidArgument("concat of zero tensors".into()))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), v));
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(rows, cols, data)?;
        let rg = self.needs(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| AutodiffError::InvalidArgument("concat of zero tensors".into()))?;
        let cols = self.value(*first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(shape_err("concat_rows", self.value(*first), v));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(rows, cols, data)?;
        let rg = self.needs(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(x);
        if start > end || end > v.cols() {
            return Err(AutodiffError::InvalidArgument(format!(
                "column slice {start}..{end} out of range for {:?}",
                v.shape()
            )));
        }
        let mut data = Vec::with_capacity(v.rows() * (end - start));
        for r in 0..v.rows() {
            data.extend_from_slice(&v.row(r)[start..end]);
        }
        let out = Tensor::new(v.rows(), end - start, data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(x);
        if start > end || end > v.rows() {
            return Err(AutodiffError::InvalidArgument(format!(
                "row slice {start}..{end} out of range for {:?}",
                v.shape()
            )));
        }
        let c = v.cols();
        let out = Tensor::new(end - start, c, v.data()[start * c..end * c].to_vec())?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Records an externally computed operation.
    pub fn custom(&mut self, inputs: &[NodeId], output: Tensor, op: Box<dyn CustomOp>) -> NodeId {
        let rg = self.needs(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Backpropagates from a scalar node, adding `d loss / d leaf` into the
    /// stored gradient of every differentiable leaf it depends on.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let shape = self.value(loss).shape();
        if shape != [1, 1] {
            return Err(AutodiffError::NotScalar { shape });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g)?,
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (parent, pg) in self.local_grads(idx, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }

    /// Gradients with respect to each parent of node `idx`, given the
    /// gradient `g` of the node's output.
    fn local_grads(&self, idx: usize, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |id: NodeId| &self.nodes[id.0].value;
        let rg = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if rg(*a) {
                    let ga = kernels::matmul_nt(g.data(), vb.data(), m, n, k);
                    res.push((*a, Tensor::new(m, k, ga)?));
                }
                if rg(*b) {
                    let gb = kernels::matmul_tn(va.data(), g.data(), m, k, n);
                    res.push((*b, Tensor::new(k, n, gb)?));
                }
            }
            Op::Transpose(a) => res.push((*a, g.transpose())),
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, map(g, |v| -v)));
            }
            Op::AddRow(a, row) => {
                res.push((*a, g.clone()));
                if rg(*row) {
                    let n = g.cols();
                    let mut acc = vec![0.0; n];
                    for r in 0..g.rows() {
                        for (o, v) in acc.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    res.push((*row, Tensor::new(1, n, acc)?));
                }
            }
            Op::Scale(a, f) => res.push((*a, map(g, |v| v * f))),
            Op::MulScalar(a, s) => {
                let factor = val(*s).item()?;
                res.push((*a, map(g, |v| v * factor)));
                if rg(*s) {
                    let d: f64 = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                    res.push((*s, Tensor::scalar(d)));
                }
            }
            Op::Exp(a) => {
                let data = g.data().iter().zip(out.data()).map(|(x, y)| x * y).collect();
                res.push((*a, Tensor::new(g.rows(), g.cols(), data)?));
            }
            Op::Gelu(a) => {
                let data = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(x, &y)| x * kernels::gelu_grad(y))
                    .collect();
                res.push((*a, Tensor::new(g.rows(), g.cols(), data)?));
            }
            Op::Tanh(a) => {
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(x, y)| x * (1.0 - y * y))
                    .collect();
                res.push((*a, Tensor::new(g.rows(), g.cols(), data)?));
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                let mut data = vec![0.0; out.len()];
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for c in 0..n {
                        data[r * n + c] = y[c] * (gr[c] - dot);
                    }
                }
                res.push((*a, Tensor::new(out.rows(), n, data)?));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = out.cols();
                let gv = val(*gain).data();
                if rg(*x) {
                    let mut dx = vec![0.0; out.len()];
                    for r in 0..out.rows() {
                        let gr = g.row(r);
                        let xh = &xhat[r * n..(r + 1) * n];
                        let dxhat: Vec<f64> = (0..n).map(|c| gr[c] * gv[c]).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let nf = n as f64;
                        for c in 0..n {
                            dx[r * n + c] = inv_std[r] / nf * (nf * dxhat[c] - sum_d - xh[c] * sum_dx);
                        }
                    }
                    res.push((*x, Tensor::new(out.rows(), n, dx)?));
                }
                if rg(*gain) {
                    let mut dg = vec![0.0; n];
                    for r in 0..out.rows() {
                        for c in 0..n {
                            dg[c] += g.get(r, c) * xhat[r * n + c];
                        }
                    }
                    res.push((*gain, Tensor::new(1, n, dg)?));
                }
                if rg(*bias) {
                    let mut db = vec![0.0; n];
                    for r in 0..out.rows() {
                        for (o, v) in db.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    res.push((*bias, Tensor::new(1, n, db)?));
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let n = out.cols();
                let mut dx = vec![0.0; out.len()];
                for r in 0..out.rows() {
                    if norms[r] == 0.0 {
                        continue;
                    }
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        dx[r * n + c] = (gr[c] - y[c] * dot) / norms[r];
                    }
                }
                res.push((*x, Tensor::new(out.rows(), n, dx)?));
            }
            Op::CrossEntropyDiag { x, probs } => {
                let n = val(*x).rows();
                let scale = g.item()? / n as f64;
                let mut dx = probs.clone();
                for i in 0..n {
                    dx[i * n + i] -= 1.0;
                }
                dx.iter_mut().for_each(|v| *v *= scale);
                res.push((*x, Tensor::new(n, n, dx)?));
            }
            Op::Mse(p, t) => {
                let (vp, vt) = (val(*p), val(*t));
                let scale = 2.0 * g.item()? / vp.len() as f64;
                let d: Vec<f64> = vp
                    .data()
                    .iter()
                    .zip(vt.data())
                    .map(|(a, b)| scale * (a - b))
                    .collect();
                if rg(*t) {
                    let neg = d.iter().map(|v| -v).collect();
                    res.push((*t, Tensor::new(vp.rows(), vp.cols(), neg)?));
                }
                res.push((*p, Tensor::new(vp.rows(), vp.cols(), d)?));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if rg(p) {
                        let mut data = Vec::with_capacity(g.rows() * w);
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        res.push((p, Tensor::new(g.rows(), w, data)?));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let h = val(p).rows();
                    if rg(p) {
                        let data = g.data()[offset * c..(offset + h) * c].to_vec();
                        res.push((p, Tensor::new(h, c, data)?));
                    }
                    offset += h;
                }
            }
            Op::SliceCols { x, start } => {
                let vx = val(*x);
                let mut dx = Tensor::zeros(vx.rows(), vx.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        dx.set(r, start + c, g.get(r, c));
                    }
                }
                res.push((*x, dx));
            }
            Op::SliceRows { x, start } => {
                let vx = val(*x);
                let mut dx = Tensor::zeros(vx.rows(), vx.cols());
                let c = vx.cols();
                dx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                res.push((*x, dx));
            }
            Op::Sum(x) => {
                let vx = val(*x);
                res.push((*x, Tensor::full(vx.rows(), vx.cols(), g.item()?)));
            }
            Op::Mean(x) => {
                let vx = val(*x);
                let v = g.item()? / vx.len() as f64;
                res.push((*x, Tensor::full(vx.rows(), vx.cols(), v)));
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
                let grads = op.backward(&ins, out, g);
                if grads.len() != inputs.len() {
                    return Err(AutodiffError::InvalidArgument(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                for (&i, gi) in inputs.iter().zip(grads) {
                    if gi.shape() != val(i).shape() {
                        return Err(shape_err("custom backward", val(i), &gi));
                    }
                    res.push((i, gi));
                }
            }
        }
        Ok(res)
    }
}
