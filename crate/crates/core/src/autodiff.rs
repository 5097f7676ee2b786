//! Define-by-run reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation together with its forward value.
//! [`Tape::backward`] walks the record in reverse and returns the adjoint of
//! every node with respect to a scalar loss. Node ids are handed out in
//! creation order, so inputs always precede the nodes that consume them and
//! a single reverse sweep is a valid topological traversal.
//!
//! Tapes are cheap to build; the training loop creates a fresh one for each
//! minibatch.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Floor applied to probabilities before taking the log in
/// [`Tape::cross_entropy`].
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    CrossEntropy {
        probs: NodeId,
        labels: Vec<usize>,
        weights: Option<Vec<f64>>,
    },
    GradReversal(NodeId, f64),
    Sum(NodeId),
    Scale(NodeId, f64),
    Add(NodeId, NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], one per node.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Matrix>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &Matrix {
        &self.adjoints[id.0]
    }

    pub fn len(&self) -> usize {
        self.adjoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjoints.is_empty()
    }
}

impl Tape {
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

    fn push(&mut self, op: Op, value: Matrix, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Records an input (parameter or data). Non-finite entries are rejected.
    pub fn leaf(&mut self, value: Matrix) -> Result<NodeId> {
        self.push(Op::Leaf, value, "leaf")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), value, "matmul")
    }

    /// Adds the `1 x cols` row vector `b` to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::dimension("add_bias", xv.shape(), bv.shape()));
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (o, &bias) in value.row_mut(r).iter_mut().zip(bv.data()) {
                *o += bias;
            }
        }
        self.push(Op::AddBias(x, b), value, "add_bias")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(x), value, "relu")
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        self.push(Op::SoftmaxRows(x), value, "softmax_rows")
    }

    /// Mean over rows of `w_i * -ln(max(probs[i, labels[i]], LOG_FLOOR))`.
    ///
    /// The mean divides by the row count, not by the total weight. Without
    /// `weights` every row has weight one.
    pub fn cross_entropy(
        &mut self,
        probs: NodeId,
        labels: &[usize],
        weights: Option<&[f64]>,
    ) -> Result<NodeId> {
        let p = self.value(probs);
        if labels.len() != p.rows() {
            return Err(Error::dimension(
                "cross_entropy labels",
                p.shape(),
                (labels.len(), 1),
            ));
        }
        if let Some(w) = weights {
            if w.len() != p.rows() {
                return Err(Error::dimension(
                    "cross_entropy weights",
                    p.shape(),
                    (w.len(), 1),
                ));
            }
        }
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= p.cols() {
                return Err(Error::Index {
                    what: "label",
                    index: y,
                    bound: p.cols(),
                });
            }
            let w = weights.map_or(1.0, |w| w[i]);
            total += w * -p.get(i, y).max(LOG_FLOOR).ln();
        }
        let value = Matrix::scalar(total / p.rows() as f64);
        let op = Op::CrossEntropy {
            probs,
            labels: labels.to_vec(),
            weights: weights.map(<[f64]>::to_vec),
        };
        self.push(op, value, "cross_entropy")
    }

    /// Identity on the forward pass; scales the incoming adjoint by
    /// `-coeff` on the backward pass.
    pub fn grad_reversal(&mut self, x: NodeId, coeff: f64) -> Result<NodeId> {
        if !(coeff >= 0.0) || !coeff.is_finite() {
            return Err(Error::Parameter(format!(
                "gradient reversal coefficient must be finite and >= 0, got {coeff}"
            )));
        }
        let value = self.value(x).clone();
        self.push(Op::GradReversal(x, coeff), value, "grad_reversal")
    }

    /// Sum of all entries as a `1x1` node.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let value = Matrix::scalar(self.value(x).sum());
        self.push(Op::Sum(x), value, "sum")
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let value = self.value(x).map(|v| factor * v);
        self.push(Op::Scale(x, factor), value, "scale")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dimension("add", av.shape(), bv.shape()));
        }
        let mut value = av.clone();
        value.add_assign(bv);
        self.push(Op::Add(a, b), value, "add")
    }

    /// Reverse sweep from a `1x1` loss node. Nodes that do not feed the loss
    /// get zero adjoints.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let mut adj: Vec<Matrix> = self
            .nodes
            .iter()
            .map(|n| Matrix::zeros(n.value.rows(), n.value.cols()))
            .collect();
        adj[loss.0] = Matrix::scalar(1.0);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            // Detach the upstream adjoint so inputs (always lower ids) can be
            // borrowed mutably.
            let g = std::mem::replace(&mut adj[id], Matrix::scalar(0.0));
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let da = g.matmul(&bv.transpose())?;
                    let db = av.transpose().matmul(&g)?;
                    adj[a.0].add_assign(&da);
                    adj[b.0].add_assign(&db);
                }
                Op::AddBias(x, b) => {
                    adj[x.0].add_assign(&g);
                    let db = adj[b.0].data_mut();
                    for r in 0..g.rows() {
                        for (d, &v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let dx = adj[x.0].data_mut();
                    for ((d, &gv), &xi) in dx.iter_mut().zip(g.data()).zip(xv.data()) {
                        if xi > 0.0 {
                            *d += gv;
                        }
                    }
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let dx = &mut adj[x.0];
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &yi), &gi) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *d += yi * (gi - dot);
                        }
                    }
                }
                Op::CrossEntropy {
                    probs,
                    labels,
                    weights,
                } => {
                    let p = self.value(*probs);
                    let n = p.rows() as f64;
                    let upstream = g.item();
                    let dp = &mut adj[probs.0];
                    for (i, &y) in labels.iter().enumerate() {
                        let pi = p.get(i, y);
                        if pi > LOG_FLOOR {
                            let w = weights.as_ref().map_or(1.0, |w| w[i]);
                            let cur = dp.get(i, y);
                            dp.set(i, y, cur - upstream * w / (n * pi));
                        }
                    }
                }
                Op::GradReversal(x, coeff) => {
                    adj[x.0].add_scaled(-coeff, &g);
                }
                Op::Sum(x) => {
                    let upstream = g.item();
                    for d in adj[x.0].data_mut() {
                        *d += upstream;
                    }
                }
                Op::Scale(x, factor) => {
                    adj[x.0].add_scaled(*factor, &g);
                }
                Op::Add(a, b) => {
                    adj[a.0].add_assign(&g);
                    adj[b.0].add_assign(&g);
                }
            }
            adj[id] = g;
        }
        Ok(Gradients { adjoints: adj })
    }
}

/// Numerically stable softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
