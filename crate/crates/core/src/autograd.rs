//! Tape-based reverse-mode differentiation over tensor primitives.
//!
//! The tape is define-by-run: recording an op computes its value
//! immediately, and the recorded program can later be replayed with
//! different leaf/parameter bindings (`forward`), which is what the
//! finite-difference gradient check does. Backward is a reverse sweep over
//! a node range with a persistent gradient buffer, so a graph split across
//! per-task segments (the wavefront strategies) composes into exactly the
//! same accumulation a single full sweep performs.
//!
//! Gradients accumulate (`+=`) whenever a node feeds several consumers —
//! weight reuse across RNN timesteps depends on this.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use std::collections::BTreeMap;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op<S> {
    /// Input bound by the caller; not differentiated into unless requested.
    Leaf,
    /// Learnable input; gradients are collected per parameter name.
    Param,
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `a + bias` where bias is a `1 x n` row broadcast over rows of `a`.
    AddRow(NodeId, NodeId),
    /// `a * col` where col is an `m x 1` column broadcast over columns.
    MulCol(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Scale(NodeId, S),
    Concat { axis: usize, parts: Vec<NodeId> },
    SliceCols { input: NodeId, from: usize, to: usize },
    GatherRows { input: NodeId, idx: Vec<usize> },
    SoftmaxRows(NodeId),
    /// Per-row `logsumexp(logits) - logits[target]`, shape `m x 1`.
    /// Fused so the backward path never divides by a vanishing probability.
    CrossEntropyRows { logits: NodeId, targets: Vec<usize> },
    /// Sum of all elements, shape `1 x 1`.
    SumAll(NodeId),
}

struct Node<S: Scalar> {
    op: Op<S>,
    value: Tensor<S>,
    bound: bool,
}

/// Gradients keyed by parameter name; shapes mirror the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<S: Scalar = f32> {
    map: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Default for GradientSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> GradientSet<S> {
    pub fn new() -> Self {
        GradientSet {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<S>) {
        self.map.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.map.get(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn total_params(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Elementwise `self += other`. Key sets and shapes must agree.
    pub fn add_assign(&mut self, other: &GradientSet<S>) -> Result<()> {
        if self.map.len() != other.map.len() {
            return Err(Error::GradientMismatch(format!(
                "key counts {} vs {}",
                self.map.len(),
                other.map.len()
            )));
        }
        for (name, g) in &other.map {
            let mine = self
                .map
                .get_mut(name)
                .ok_or_else(|| Error::GradientMismatch(format!("missing key {name}")))?;
            if mine.shape() != g.shape() {
                return Err(Error::GradientMismatch(format!(
                    "shape of {name}: {:?} vs {:?}",
                    mine.shape(),
                    g.shape()
                )));
            }
            mine.add_assign(g)?;
        }
        Ok(())
    }

    /// Disjoint union; duplicate keys are an error.
    pub fn merge_disjoint(&mut self, other: GradientSet<S>) -> Result<()> {
        for (name, g) in other.map {
            if self.map.contains_key(&name) {
                return Err(Error::GradientMismatch(format!("duplicate key {name}")));
            }
            self.map.insert(name, g);
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, s: S) {
        for g in self.map.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

/// Worst per-tensor relative disagreement between two gradient sets:
/// `max over params of ||a - b||_inf / max(||a||_inf, ||b||_inf, 1e-6)`.
pub fn max_rel_err<S: Scalar>(a: &GradientSet<S>, b: &GradientSet<S>) -> Result<f64> {
    if a.map.len() != b.map.len() {
        return Err(Error::GradientMismatch("key counts differ".into()));
    }
    let mut worst = 0.0f64;
    for (name, ga) in &a.map {
        let gb = b
            .get(name)
            .ok_or_else(|| Error::GradientMismatch(format!("missing key {name}")))?;
        if ga.shape() != gb.shape() {
            return Err(Error::GradientMismatch(format!("shape of {name}")));
        }
        let den = ga
            .max_abs()
            .as_f64()
            .max(gb.max_abs().as_f64())
            .max(1e-6);
        let mut num = 0.0f64;
        for (x, y) in ga.data().iter().zip(gb.data()) {
            num = num.max((x.as_f64() - y.as_f64()).abs());
        }
        worst = worst.max(num / den);
    }
    Ok(worst)
}

/// Recorded computation graph in topological order.
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    params: Vec<(String, NodeId)>,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id].value
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.iter().map(|(n, _)| n)
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            bound: true,
        });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Leaf with a declared shape but no value yet; `forward` fails until
    /// it is bound via [`Tape::bind`].
    pub fn placeholder(&mut self, shape: &[usize]) -> NodeId {
        let id = self.push(Op::Leaf, Tensor::zeros(shape));
        self.nodes[id].bound = false;
        id
    }

    pub fn param(&mut self, name: impl Into<String>, value: Tensor<S>) -> NodeId {
        let id = self.push(Op::Param, value);
        self.params.push((name.into(), id));
        id
    }

    /// Rebinds a leaf or parameter value (shape must match).
    pub fn bind(&mut self, id: NodeId, value: Tensor<S>) -> Result<()> {
        match self.nodes[id].op {
            Op::Leaf | Op::Param => {
                if self.nodes[id].value.shape() != value.shape() {
                    return Err(Error::shape(
                        "bind",
                        self.nodes[id].value.shape(),
                        value.shape(),
                    ));
                }
                self.nodes[id].value = value;
                self.nodes[id].bound = true;
                Ok(())
            }
            _ => Err(Error::UnboundLeaf(id)),
        }
    }

    /// Adds `delta` to one element of a leaf/param value (gradient checking).
    pub fn nudge(&mut self, id: NodeId, elem: usize, delta: S) {
        self.nodes[id].value.data_mut()[elem] += delta;
    }

    // ── Recorded primitives ──────────────────────────────────────────

    fn eval(&self, op: &Op<S>) -> Result<Tensor<S>> {
        let v = |id: NodeId| &self.nodes[id].value;
        match op {
            Op::Leaf | Op::Param => unreachable!("leaves are never re-evaluated"),
            Op::Matmul(a, b) => v(*a).matmul(v(*b)),
            Op::Transpose(a) => v(*a).transpose(),
            Op::Add(a, b) => v(*a).add(v(*b)),
            Op::Sub(a, b) => v(*a).sub(v(*b)),
            Op::Mul(a, b) => v(*a).mul(v(*b)),
            Op::AddRow(a, b) => v(*a).add_row(v(*b)),
            Op::MulCol(a, b) => v(*a).mul_col(v(*b)),
            Op::Tanh(a) => v(*a).tanh(),
            Op::Sigmoid(a) => v(*a).sigmoid(),
            Op::Scale(a, s) => Ok(v(*a).scale(*s)),
            Op::Concat { axis, parts } => {
                let refs: Vec<&Tensor<S>> = parts.iter().map(|&p| v(p)).collect();
                Tensor::concat(&refs, *axis)
            }
            Op::SliceCols { input, from, to } => v(*input).slice_cols(*from, *to),
            Op::GatherRows { input, idx } => v(*input).gather_rows(idx),
            Op::SoftmaxRows(a) => v(*a).softmax_rows(None),
            Op::CrossEntropyRows { logits, targets } => {
                let lp = v(*logits).log_softmax_rows()?;
                let mut out = Vec::with_capacity(targets.len());
                for (i, &t) in targets.iter().enumerate() {
                    if t >= lp.cols() {
                        return Err(Error::TokenOutOfRange {
                            id: t,
                            vocab: lp.cols(),
                        });
                    }
                    out.push(-lp.at(i, t));
                }
                Tensor::from_flat(&[targets.len(), 1], out)
            }
            Op::SumAll(a) => Tensor::from_flat(&[1, 1], vec![v(*a).sum()]),
        }
    }

    fn record(&mut self, op: Op<S>) -> Result<NodeId> {
        let value = self.eval(&op)?;
        Ok(self.push(op, value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.record(Op::AddRow(a, bias))
    }

    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        self.record(Op::MulCol(a, col))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Sigmoid(a))
    }

    pub fn scale(&mut self, a: NodeId, s: S) -> Result<NodeId> {
        self.record(Op::Scale(a, s))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        self.record(Op::Concat {
            axis,
            parts: parts.to_vec(),
        })
    }

    pub fn slice_cols(&mut self, input: NodeId, from: usize, to: usize) -> Result<NodeId> {
        self.record(Op::SliceCols { input, from, to })
    }

    pub fn gather_rows(&mut self, input: NodeId, idx: &[usize]) -> Result<NodeId> {
        self.record(Op::GatherRows {
            input,
            idx: idx.to_vec(),
        })
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::SoftmaxRows(a))
    }

    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        self.record(Op::CrossEntropyRows {
            logits,
            targets: targets.to_vec(),
        })
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::SumAll(a))
    }

    // ── Forward replay ───────────────────────────────────────────────

    /// Recomputes every non-leaf node in recording order from the current
    /// leaf/parameter bindings.
    pub fn forward(&mut self) -> Result<()> {
        for id in 0..self.nodes.len() {
            match self.nodes[id].op {
                Op::Leaf | Op::Param => {
                    if !self.nodes[id].bound {
                        return Err(Error::UnboundLeaf(id));
                    }
                }
                _ => {
                    let op = self.nodes[id].op.clone();
                    self.nodes[id].value = self.eval(&op)?;
                }
            }
        }
        Ok(())
    }

    // ── Backward ─────────────────────────────────────────────────────

    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Accumulates a cotangent into a node's gradient buffer.
    pub fn seed_grad(&mut self, id: NodeId, grad: Tensor<S>) -> Result<()> {
        if grad.shape() != self.nodes[id].value.shape() {
            return Err(Error::shape(
                "seed_grad",
                self.nodes[id].value.shape(),
                grad.shape(),
            ));
        }
        match &mut self.grads[id] {
            Some(g) => g.add_assign(&grad),
            slot => {
                *slot = Some(grad);
                Ok(())
            }
        }
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads[id].as_ref()
    }

    /// Gradient of a node, zeros if nothing flowed into it.
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor<S> {
        self.grads[id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.nodes[id].value.shape()))
    }

    fn accum(&mut self, id: NodeId, delta: Tensor<S>) -> Result<()> {
        self.seed_grad(id, delta)
    }

    /// Reverse sweep over nodes `[lo, hi)`, propagating already-deposited
    /// gradients toward inputs. Gradients flowing to nodes below `lo` stay
    /// in the buffer for a later sweep; this is how per-task segments of
    /// the wavefront compose into one global backward pass.
    pub fn sweep_range(&mut self, lo: usize, hi: usize) -> Result<()> {
        for id in (lo..hi.min(self.nodes.len())).rev() {
            let Some(dout) = self.grads[id].clone() else {
                continue;
            };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf | Op::Param => {}
                Op::Matmul(a, b) => {
                    let bt = self.nodes[b].value.transpose()?;
                    let at = self.nodes[a].value.transpose()?;
                    self.accum(a, dout.matmul(&bt)?)?;
                    self.accum(b, at.matmul(&dout)?)?;
                }
                Op::Transpose(a) => {
                    self.accum(a, dout.transpose()?)?;
                }
                Op::Add(a, b) => {
                    self.accum(a, dout.clone())?;
                    self.accum(b, dout)?;
                }
                Op::Sub(a, b) => {
                    self.accum(a, dout.clone())?;
                    self.accum(b, dout.scale(-S::one()))?;
                }
                Op::Mul(a, b) => {
                    let da = dout.mul(&self.nodes[b].value)?;
                    let db = dout.mul(&self.nodes[a].value)?;
                    self.accum(a, da)?;
                    self.accum(b, db)?;
                }
                Op::AddRow(a, bias) => {
                    self.accum(bias, dout.sum_rows()?)?;
                    self.accum(a, dout)?;
                }
                Op::MulCol(a, col) => {
                    let da = dout.mul_col(&self.nodes[col].value)?;
                    let dcol = dout.mul(&self.nodes[a].value)?.sum_cols()?;
                    self.accum(a, da)?;
                    self.accum(col, dcol)?;
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[id].value;
                    let da = dout.mul(&y.map(|v| S::one() - v * v))?;
                    self.accum(a, da)?;
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[id].value;
                    let da = dout.mul(&y.map(|v| v * (S::one() - v)))?;
                    self.accum(a, da)?;
                }
                Op::Scale(a, s) => {
                    self.accum(a, dout.scale(s))?;
                }
                Op::Concat { axis, parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let extent = self.nodes[p].value.shape()[axis];
                        let piece = if axis == 0 {
                            dout.slice_rows(offset, offset + extent)?
                        } else {
                            dout.slice_cols(offset, offset + extent)?
                        };
                        offset += extent;
                        self.accum(p, piece)?;
                    }
                }
                Op::SliceCols { input, from, to } => {
                    let mut dinput = Tensor::zeros(self.nodes[input].value.shape());
                    let n = dinput.cols();
                    for i in 0..dout.rows() {
                        let src = dout.row(i).to_vec();
                        let dst = &mut dinput.data_mut()[i * n + from..i * n + to];
                        for (d, s) in dst.iter_mut().zip(&src) {
                            *d += *s;
                        }
                    }
                    self.accum(input, dinput)?;
                }
                Op::GatherRows { input, idx } => {
                    let mut dinput = Tensor::zeros(self.nodes[input].value.shape());
                    let n = dinput.cols();
                    for (k, &i) in idx.iter().enumerate() {
                        let src = dout.row(k).to_vec();
                        let dst = &mut dinput.data_mut()[i * n..(i + 1) * n];
                        for (d, s) in dst.iter_mut().zip(&src) {
                            *d += *s;
                        }
                    }
                    self.accum(input, dinput)?;
                }
                Op::SoftmaxRows(a) => {
                    // dx = y * (dout - rowsum(dout * y))
                    let y = self.nodes[id].value.clone();
                    let dy = dout.mul(&y)?;
                    let rowsums = dy.sum_cols()?;
                    let adjusted = dout.sub(&rowsums.gather_cols_broadcast(y.cols()))?;
                    self.accum(a, adjusted.mul(&y)?)?;
                }
                Op::CrossEntropyRows { logits, targets } => {
                    // dlogits row i = dout[i] * (softmax(row i) - onehot(t_i))
                    let sm = self.nodes[logits].value.softmax_rows(None)?;
                    let mut dl = sm;
                    for (i, &t) in targets.iter().enumerate() {
                        let scale = dout.at(i, 0);
                        let row = dl.row_mut(i);
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                        row[t] -= scale;
                    }
                    self.accum(logits, dl)?;
                }
                Op::SumAll(a) => {
                    let shape = self.nodes[a].value.shape().to_vec();
                    self.accum(a, Tensor::filled(&shape, dout.item()))?;
                }
            }
        }
        Ok(())
    }

    /// Full backward from a scalar loss node. Clears previous gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<GradientSet<S>> {
        if !self.nodes[loss].value.is_scalar() {
            return Err(Error::NonScalarLoss(
                self.nodes[loss].value.shape().to_vec(),
            ));
        }
        self.reset_grads();
        let seed = Tensor::from_flat(self.nodes[loss].value.shape(), vec![S::one()])?;
        self.seed_grad(loss, seed)?;
        self.sweep_range(0, self.nodes.len())?;
        Ok(self.param_grads())
    }

    /// Collects gradients for every declared parameter (zeros if unused).
    pub fn param_grads(&self) -> GradientSet<S> {
        let mut gs = GradientSet::new();
        for (name, id) in &self.params {
            gs.insert(name.clone(), self.grad_or_zeros(*id));
        }
        gs
    }
}

impl<S: Scalar> Tensor<S> {
    /// Broadcasts an `m x 1` column out to `m x n` (softmax backward helper).
    fn gather_cols_broadcast(&self, n: usize) -> Tensor<S> {
        debug_assert_eq!(self.shape()[1], 1);
        let m = self.shape()[0];
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let v = self.data()[i];
            data.extend(std::iter::repeat(v).take(n));
        }
        Tensor::from_flat(&[m, n], data).expect("broadcast shape")
    }
}

/// Max relative error between backward gradients and central finite
/// differences, over every element of every parameter. Denominators are
/// floored at 1e-6 so roundoff on near-zero gradients does not dominate.
/// Call at 64-bit precision; reports, never asserts.
pub fn grad_check<S: Scalar>(tape: &mut Tape<S>, loss: NodeId, eps: S) -> Result<f64> {
    let analytic = {
        tape.forward()?;
        tape.backward(loss)?
    };
    if tape.params.is_empty() {
        return Ok(0.0);
    }
    let two = S::from_f64(2.0);
    let mut max_rel = 0.0f64;
    let param_list = tape.params.clone();
    for (name, pid) in param_list {
        let n = tape.nodes[pid].value.numel();
        let got = analytic.get(&name).expect("param gradient present");
        for e in 0..n {
            tape.nudge(pid, e, eps);
            tape.forward()?;
            let f_plus = tape.value(loss).item();
            tape.nudge(pid, e, -(eps + eps));
            tape.forward()?;
            let f_minus = tape.value(loss).item();
            tape.nudge(pid, e, eps);
            let fd = ((f_plus - f_minus) / (two * eps)).as_f64();
            let bp = got.data()[e].as_f64();
            let denom = fd.abs().max(bp.abs()).max(1e-6);
            max_rel = max_rel.max((fd - bp).abs() / denom);
        }
    }
    tape.forward()?; // restore values
    Ok(max_rel)
}
