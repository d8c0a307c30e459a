//! Eagerly evaluated computation tape.
//!
//! Values are computed as nodes are pushed, so the tape is always in
//! topological order and parent ids are strictly smaller than child ids.
//! The backward pass itself is expressed as new tape nodes; calling
//! `backward` with `record = true` therefore makes the gradients
//! differentiable, which is what the meta-update needs to push gradient
//! through an inner gradient-descent step. A non-recorded backward computes
//! the same nodes, copies the gradients out and truncates the tape back.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Operation tag. Parents are stored inside each variant.
#[derive(Clone, Debug)]
pub enum Op {
    /// Leaf value (input or parameter); receives gradient.
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Sqrt(NodeId),
    /// Multiply by a compile-time constant scalar.
    Scale(NodeId, f64),
    /// Add a constant scalar elementwise.
    AddScalar(NodeId, f64),
    /// BxD -> 1xD sum over rows.
    SumRows(NodeId),
    /// 1xD -> nxD replication.
    BroadcastRows(NodeId, usize),
    /// BxD -> Bx1 sum over columns.
    SumCols(NodeId),
    /// Bx1 -> Bxn replication.
    BroadcastCols(NodeId, usize),
    /// Any shape -> 1x1 total sum.
    SumAll(NodeId),
    /// Gradient reversal: identity forward, negation backward.
    Grl(NodeId),
    /// BxC -> Bx1 row-wise log-sum-exp (numerically stable).
    LogSumExpRows(NodeId),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Sqrt(..) => "sqrt",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::SumRows(..) => "sum_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::SumCols(..) => "sum_cols",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::SumAll(..) => "sum_all",
            Op::Grl(..) => "grl",
            Op::LogSumExpRows(..) => "log_sum_exp_rows",
        }
    }
}

#[derive(Clone, Debug)]
pub struct GraphNode {
    pub id: NodeId,
    pub op: Op,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<GraphNode>,
    /// Gradient node ids from the last recorded backward.
    recorded_grads: Option<Vec<Option<NodeId>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), recorded_grads: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &GraphNode {
        &self.nodes[id]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Gradient tensor filled in by the last backward pass.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id].grad.as_ref()
    }

    /// Gradient as a tape node, available only after a recorded backward.
    pub fn grad_node(&self, id: NodeId) -> Result<Option<NodeId>> {
        match &self.recorded_grads {
            None => Err(Error::NotRecorded),
            Some(map) => Ok(map.get(id).copied().flatten()),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite { id, op: op.name() });
        }
        self.nodes.push(GraphNode { id, op, value, grad: None });
        Ok(id)
    }

    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf, value)
    }

    pub fn leaf_scalar(&mut self, v: f64) -> Result<NodeId> {
        self.leaf(Tensor::scalar(v))
    }

    fn shape_check(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        ok: bool,
    ) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op,
                a,
                a_shape: self.nodes[a].value.shape(),
                b,
                b_shape: self.nodes[b].value.shape(),
            })
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let same = self.nodes[a].value.shape() == self.nodes[b].value.shape();
        self.shape_check("add", a, b, same)?;
        let v = self.nodes[a].value.zip(&self.nodes[b].value, |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let same = self.nodes[a].value.shape() == self.nodes[b].value.shape();
        self.shape_check("sub", a, b, same)?;
        let v = self.nodes[a].value.zip(&self.nodes[b].value, |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let same = self.nodes[a].value.shape() == self.nodes[b].value.shape();
        self.shape_check("mul", a, b, same)?;
        let v = self.nodes[a].value.zip(&self.nodes[b].value, |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let same = self.nodes[a].value.shape() == self.nodes[b].value.shape();
        self.shape_check("div", a, b, same)?;
        let v = self.nodes[a].value.zip(&self.nodes[b].value, |x, y| x / y);
        self.push(Op::Div(a, b), v)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.map(|x| -x);
        self.push(Op::Neg(a), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ok = self.nodes[a].value.cols() == self.nodes[b].value.rows();
        self.shape_check("matmul", a, b, ok)?;
        let v = self.nodes[a].value.matmul(&self.nodes[b].value);
        self.push(Op::MatMul(a, b), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.map(f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.nodes[a].value.map(|x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.nodes[a].value.map(|x| x + c);
        self.push(Op::AddScalar(a, c), v)
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let t = &self.nodes[a].value;
        let (rows, cols) = t.shape();
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c] += t.get(r, c);
            }
        }
        let v = Tensor::new(1, cols, out)?;
        self.push(Op::SumRows(a), v)
    }

    pub fn broadcast_rows(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let t = &self.nodes[a].value;
        if t.rows() != 1 {
            return Err(Error::BadShape { op: "broadcast_rows", shape: t.shape() });
        }
        let cols = t.cols();
        let mut out = Vec::with_capacity(n * cols);
        for _ in 0..n {
            out.extend_from_slice(t.data());
        }
        let v = Tensor::new(n, cols, out)?;
        self.push(Op::BroadcastRows(a, n), v)
    }

    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId> {
        let t = &self.nodes[a].value;
        let (rows, cols) = t.shape();
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            for c in 0..cols {
                out[r] += t.get(r, c);
            }
        }
        let v = Tensor::new(rows, 1, out)?;
        self.push(Op::SumCols(a), v)
    }

    pub fn broadcast_cols(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let t = &self.nodes[a].value;
        if t.cols() != 1 {
            return Err(Error::BadShape { op: "broadcast_cols", shape: t.shape() });
        }
        let rows = t.rows();
        let mut out = Vec::with_capacity(rows * n);
        for r in 0..rows {
            let v = t.get(r, 0);
            out.extend(std::iter::repeat(v).take(n));
        }
        let v = Tensor::new(rows, n, out)?;
        self.push(Op::BroadcastCols(a, n), v)
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.nodes[a].value.data().iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s))
    }

    /// Gradient reversal layer: exact identity forward.
    pub fn grl(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.clone();
        self.push(Op::Grl(a), v)
    }

    pub fn log_sum_exp_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let t = &self.nodes[a].value;
        let (rows, cols) = t.shape();
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut m = f64::NEG_INFINITY;
            for c in 0..cols {
                m = m.max(t.get(r, c));
            }
            let s: f64 = (0..cols).map(|c| (t.get(r, c) - m).exp()).sum();
            out.push(m + s.ln());
        }
        let v = Tensor::new(rows, 1, out)?;
        self.push(Op::LogSumExpRows(a), v)
    }

    /// Convenience: mean over rows (BxD -> 1xD).
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.nodes[a].value.rows();
        let s = self.sum_rows(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Accumulates `g` into `grads[target]`, emitting an Add node on overlap.
    fn accumulate(
        &mut self,
        grads: &mut [Option<NodeId>],
        target: NodeId,
        g: NodeId,
    ) -> Result<()> {
        grads[target] = Some(match grads[target] {
            None => g,
            Some(prev) => self.add(prev, g)?,
        });
        Ok(())
    }

    /// Emits the vector-Jacobian product of node `id` given upstream
    /// gradient node `gid`, accumulating into `grads`.
    fn emit_vjp(
        &mut self,
        id: NodeId,
        gid: NodeId,
        grads: &mut [Option<NodeId>],
    ) -> Result<()> {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, gid)?;
                self.accumulate(grads, b, gid)?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, gid)?;
                let n = self.neg(gid)?;
                self.accumulate(grads, b, n)?;
            }
            Op::Mul(a, b) => {
                let ga = self.mul(gid, b)?;
                self.accumulate(grads, a, ga)?;
                let gb = self.mul(gid, a)?;
                self.accumulate(grads, b, gb)?;
            }
            Op::Div(a, b) => {
                let ga = self.div(gid, b)?;
                self.accumulate(grads, a, ga)?;
                // d(a/b)/db = -a/b^2 = -y/b
                let gy = self.mul(gid, id)?;
                let gb = self.div(gy, b)?;
                let gb = self.neg(gb)?;
                self.accumulate(grads, b, gb)?;
            }
            Op::Neg(a) => {
                let g = self.neg(gid)?;
                self.accumulate(grads, a, g)?;
            }
            Op::MatMul(a, b) => {
                let bt = self.transpose(b)?;
                let ga = self.matmul(gid, bt)?;
                self.accumulate(grads, a, ga)?;
                let at = self.transpose(a)?;
                let gb = self.matmul(at, gid)?;
                self.accumulate(grads, b, gb)?;
            }
            Op::Transpose(a) => {
                let g = self.transpose(gid)?;
                self.accumulate(grads, a, g)?;
            }
            Op::Tanh(a) => {
                // 1 - y^2
                let y2 = self.mul(id, id)?;
                let one_minus = self.neg(y2)?;
                let one_minus = self.add_scalar(one_minus, 1.0)?;
                let g = self.mul(gid, one_minus)?;
                self.accumulate(grads, a, g)?;
            }
            Op::Sigmoid(a) => {
                // y (1 - y)
                let ny = self.neg(id)?;
                let one_minus = self.add_scalar(ny, 1.0)?;
                let yy = self.mul(id, one_minus)?;
                let g = self.mul(gid, yy)?;
                self.accumulate(grads, a, g)?;
            }
            Op::Exp(a) => {
                let g = self.mul(gid, id)?;
                self.accumulate(grads, a, g)?;
            }
            Op::Sqrt(a) => {
                // g / (2 sqrt)
                let half = self.scale(gid, 0.5)?;
                let g = self.div(half, id)?;
                self.accumulate(grads, a, g)?;
            }
            Op::Scale(a, c) => {
                let g = self.scale(gid, c)?;
                self.accumulate(grads, a, g)?;
            }
            Op::AddScalar(a, _) => {
                self.accumulate(grads, a, gid)?;
            }
            Op::SumRows(a) => {
                let n = self.nodes[a].value.rows();
                let g = self.broadcast_rows(gid, n)?;
                self.accumulate(grads, a, g)?;
            }
            Op::BroadcastRows(a, _) => {
                let g = self.sum_rows(gid)?;
                self.accumulate(grads, a, g)?;
            }
            Op::SumCols(a) => {
                let n = self.nodes[a].value.cols();
                let g = self.broadcast_cols(gid, n)?;
                self.accumulate(grads, a, g)?;
            }
            Op::BroadcastCols(a, _) => {
                let g = self.sum_cols(gid)?;
                self.accumulate(grads, a, g)?;
            }
            Op::SumAll(a) => {
                let (rows, cols) = self.nodes[a].value.shape();
                let gc = self.broadcast_cols(gid, cols)?;
                let g = self.broadcast_rows(gc, rows)?;
                self.accumulate(grads, a, g)?;
            }
            Op::Grl(a) => {
                let g = self.neg(gid)?;
                self.accumulate(grads, a, g)?;
            }
            Op::LogSumExpRows(a) => {
                // softmax(a) row-wise, built from a and y = lse(a) so the
                // exponent is always <= 0.
                let cols = self.nodes[a].value.cols();
                let yb = self.broadcast_cols(id, cols)?;
                let shifted = self.sub(a, yb)?;
                let soft = self.exp(shifted)?;
                let gb = self.broadcast_cols(gid, cols)?;
                let g = self.mul(gb, soft)?;
                self.accumulate(grads, a, g)?;
            }
        }
        Ok(())
    }

    /// Reverse pass from a scalar loss node.
    ///
    /// Gradients are stored in each reachable node's `grad` slot. With
    /// `record = true` the gradient computation stays on the tape as nodes
    /// (retrievable via `grad_node`), so a subsequent backward pass can
    /// differentiate through it. Without recording the tape is truncated
    /// back to its pre-backward length.
    pub fn backward(&mut self, loss: NodeId, record: bool) -> Result<()> {
        let shape = self.nodes[loss].value.shape();
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss { id: loss, shape });
        }
        let start_len = self.nodes.len();
        let mut grads: Vec<Option<NodeId>> = vec![None; loss + 1];
        let seed = self.leaf(Tensor::scalar(1.0))?;
        grads[loss] = Some(seed);
        for id in (0..=loss).rev() {
            if let Some(gid) = grads[id] {
                self.emit_vjp(id, gid, &mut grads)?;
            }
        }
        // Copy gradient tensors into the grad slots of the original nodes.
        for id in 0..=loss {
            self.nodes[id].grad = grads[id].map(|g| self.nodes[g].value.clone());
        }
        for id in (loss + 1)..start_len {
            self.nodes[id].grad = None;
        }
        if record {
            self.recorded_grads = Some(grads);
        } else {
            self.recorded_grads = None;
            self.nodes.truncate(start_len);
        }
        Ok(())
    }

    /// Gradient tensor of `id`, erroring when nothing reached it.
    pub fn grad_required(&self, id: NodeId) -> Result<&Tensor> {
        self.grad(id).ok_or(Error::NoGradient { id })
    }
}
