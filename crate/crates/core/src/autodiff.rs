//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied to [`Tensor`]s. Tensors that
//! were never placed on the tape enter it as constants the first time they are
//! used. [`Tape::backward`] walks the recording once in reverse and returns a
//! [`Gradients`] map keyed by node.
//!
//! ```
//! use tta_core::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
//! let sq = tape.square(&x).unwrap();
//! let loss = tape.sum(&sq).unwrap();
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.get(&x).unwrap().values(), &[2.0, 4.0]);
//! ```
//!
//! Tapes are single-threaded and meant to be rebuilt for every step.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::{Error, Result};

/// Added to each norm before dividing in cosine similarity.
pub const COSINE_NORM_EPS: f64 = 1e-12;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

impl NodeId {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Dense row-major `f64` array, optionally bound to a node on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    node: Option<NodeId>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} needs {expected} values, got {}",
                    values.len()
                ),
            ));
        }
        Ok(Tensor {
            shape,
            values,
            node: None,
            requires_grad: false,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            values: vec![value],
            node: None,
            requires_grad: false,
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
            node: None,
            requires_grad: false,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
            node: None,
            requires_grad: false,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: vec![value; n],
            node: None,
            requires_grad: false,
        }
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "from_rows",
                    format!("row {i} has length {}, expected {cols}", r.len()),
                ));
            }
            values.extend_from_slice(r);
        }
        Tensor::matrix(rows.len(), cols, values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Number of rows when viewed as a matrix (a vector is a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.values.len(), 1, "item() on a tensor with {} values", self.values.len());
        self.values[0]
    }

    /// Same values, unbound from any tape.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.clone(),
            node: None,
            requires_grad: false,
        }
    }

    fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(Error::shape(
                op,
                format!("expected a vector or matrix, got shape {:?}", self.shape),
            )),
        }
    }
}

/// Primitive operations understood by [`Tape::apply`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    /// `[m,k] x [k,n] -> [m,n]`
    Matmul,
    Transpose,
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    ScalarMul(f64),
    /// `[m,n] + [n]`, the vector added to every row.
    AddRow,
    /// `[m,n] * [n]`, every row scaled elementwise by the vector.
    MulRow,
    Relu,
    Exp,
    Log,
    Softmax,
    LogSoftmax,
    Sum,
    Mean,
    Square,
    /// Rowwise Euclidean norm, `[m,n] -> [m,1]`.
    L2Norm,
    /// Rowwise cosine similarity of paired rows, `[m,n],[m,n] -> [m,1]`.
    CosineSimilarity,
    StopGradient,
    /// Per-column standardization with the batch mean and biased variance.
    BatchStandardize { eps: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Matmul => "matmul",
            Op::Transpose => "transpose",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::ScalarMul(_) => "scalar_mul",
            Op::AddRow => "add_row",
            Op::MulRow => "mul_row",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Square => "square",
            Op::L2Norm => "l2_norm",
            Op::CosineSimilarity => "cosine_similarity",
            Op::StopGradient => "stop_gradient",
            Op::BatchStandardize { .. } => "batch_standardize",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Matmul | Op::Add | Op::Sub | Op::Mul | Op::AddRow | Op::MulRow => 2,
            Op::CosineSimilarity => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum NodeKind {
    Leaf,
    Constant,
    Op(Op),
}

#[derive(Clone, Debug)]
struct Node {
    kind: NodeKind,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    /// Intermediates saved for the backward pass.
    saved: Vec<f64>,
}

/// Recording of primitive applications in topological order.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records `t` as a differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Tensor {
        self.push(NodeKind::Leaf, Vec::new(), t.shape, t.values, true, Vec::new())
    }

    /// Records `t` as a constant; it never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Tensor {
        self.push(NodeKind::Constant, Vec::new(), t.shape, t.values, false, Vec::new())
    }

    fn push(
        &mut self,
        kind: NodeKind,
        inputs: Vec<usize>,
        shape: Vec<usize>,
        value: Vec<f64>,
        requires_grad: bool,
        saved: Vec<f64>,
    ) -> Tensor {
        let index = self.nodes.len();
        self.nodes.push(Node {
            kind,
            inputs,
            shape: shape.clone(),
            value: value.clone(),
            requires_grad,
            saved,
        });
        Tensor {
            shape,
            values: value,
            node: Some(NodeId { tape: self.id, index }),
            requires_grad,
        }
    }

    fn resolve(&mut self, t: &Tensor) -> Result<(usize, bool)> {
        match t.node {
            Some(id) if id.tape == self.id => Ok((id.index, self.nodes[id.index].requires_grad)),
            Some(_) => Err(Error::ForeignTensor),
            None => {
                let c = self.constant(t.clone());
                Ok((c.node.expect("constant is recorded").index, false))
            }
        }
    }

    /// Applies a primitive and records it.
    pub fn apply(&mut self, op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
        if inputs.len() != op.arity() {
            return Err(Error::shape(
                op.name(),
                format!("expected {} inputs, got {}", op.arity(), inputs.len()),
            ));
        }
        let (shape, value, saved) = forward(op, inputs)?;
        let mut ids = Vec::with_capacity(inputs.len());
        let mut any_grad = false;
        for t in inputs {
            let (id, rg) = self.resolve(t)?;
            ids.push(id);
            any_grad |= rg;
        }
        let requires_grad = any_grad && op != Op::StopGradient;
        Ok(self.push(NodeKind::Op(op), ids, shape, value, requires_grad, saved))
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Op::Matmul, &[a, b])
    }
    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::Transpose, &[a])
    }
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.apply(Op::ScalarMul(c), &[a])
    }
    pub fn add_row(&mut self, a: &Tensor, v: &Tensor) -> Result<Tensor> {
        self.apply(Op::AddRow, &[a, v])
    }
    pub fn mul_row(&mut self, a: &Tensor, v: &Tensor) -> Result<Tensor> {
        self.apply(Op::MulRow, &[a, v])
    }
    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::Relu, &[a])
    }
    pub fn exp(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::Exp, &[a])
    }
    pub fn log(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::Log, &[a])
    }
    pub fn softmax(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::Softmax, &[a])
    }
    pub fn log_softmax(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::LogSoftmax, &[a])
    }
    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::Sum, &[a])
    }
    pub fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::Mean, &[a])
    }
    pub fn square(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::Square, &[a])
    }
    pub fn l2_norm(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::L2Norm, &[a])
    }
    pub fn cosine_similarity(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Op::CosineSimilarity, &[a, b])
    }
    /// Same values; nothing downstream propagates back through the result.
    pub fn stop_gradient(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::StopGradient, &[a])
    }
    pub fn batch_standardize(&mut self, a: &Tensor, eps: f64) -> Result<Tensor> {
        self.apply(Op::BatchStandardize { eps }, &[a])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let id = match loss.node {
            Some(id) if id.tape == self.id => id.index,
            Some(_) => return Err(Error::ForeignTensor),
            None => return Err(Error::invalid("loss is not recorded on the tape")),
        };
        if self.nodes[id].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.nodes[id].shape),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[id].requires_grad {
            grads[id] = Some(vec![1.0]);
        }
        for i in (0..=id).rev() {
            let node = &self.nodes[i];
            let NodeKind::Op(op) = node.kind else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let input_vals: Vec<&Node> = node.inputs.iter().map(|&j| &self.nodes[j]).collect();
            let contributions = backward_op(op, node, &input_vals, &g);
            grads[i] = Some(g);
            for (k, contrib) in contributions.into_iter().enumerate() {
                let j = node.inputs[k];
                if !self.nodes[j].requires_grad {
                    continue;
                }
                let Some(contrib) = contrib else { continue };
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
            grads,
        })
    }
}

/// Gradients of one backward pass.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    shapes: Vec<Vec<usize>>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `t`; zeros when `t` is unreachable from the
    /// loss, `None` when `t` does not require a gradient.
    pub fn get(&self, t: &Tensor) -> Option<Tensor> {
        let id = t.node?;
        if id.tape != self.tape || !self.requires.get(id.index).copied().unwrap_or(false) {
            return None;
        }
        let shape = self.shapes[id.index].clone();
        Some(match &self.grads[id.index] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches node shape"),
            None => Tensor::zeros(shape),
        })
    }
}

fn forward(op: Op, inputs: &[&Tensor]) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>)> {
    let name = op.name();
    let a = inputs[0];
    let same_shape = |b: &Tensor| -> Result<()> {
        if a.shape != b.shape {
            return Err(Error::shape(
                name,
                format!("operands have shapes {:?} and {:?}", a.shape, b.shape),
            ));
        }
        Ok(())
    };
    let out = match op {
        Op::Matmul => {
            let b = inputs[1];
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(Error::shape(
                    name,
                    format!("cannot multiply {:?} by {:?}", a.shape, b.shape),
                ));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            (vec![m, n], matmul(&a.values, &b.values, m, k, n), Vec::new())
        }
        Op::Transpose => {
            if a.shape.len() != 2 {
                return Err(Error::shape(name, format!("expected a matrix, got {:?}", a.shape)));
            }
            let (m, n) = (a.shape[0], a.shape[1]);
            (vec![n, m], transpose(&a.values, m, n), Vec::new())
        }
        Op::Add | Op::Sub | Op::Mul => {
            let b = inputs[1];
            same_shape(b)?;
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add => |x, y| x + y,
                Op::Sub => |x, y| x - y,
                _ => |x, y| x * y,
            };
            let v = a.values.iter().zip(&b.values).map(|(&x, &y)| f(x, y)).collect();
            (a.shape.clone(), v, Vec::new())
        }
        Op::ScalarMul(c) => (a.shape.clone(), a.values.iter().map(|x| c * x).collect(), Vec::new()),
        Op::AddRow | Op::MulRow => {
            let v = inputs[1];
            if a.shape.len() != 2 || v.shape.len() != 1 || v.shape[0] != a.shape[1] {
                return Err(Error::shape(
                    name,
                    format!("cannot broadcast {:?} over rows of {:?}", v.shape, a.shape),
                ));
            }
            let n = a.shape[1];
            let out = a
                .values
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    if op == Op::AddRow {
                        x + v.values[i % n]
                    } else {
                        x * v.values[i % n]
                    }
                })
                .collect();
            (a.shape.clone(), out, Vec::new())
        }
        Op::Relu => (
            a.shape.clone(),
            a.values.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
            Vec::new(),
        ),
        Op::Exp => (a.shape.clone(), a.values.iter().map(|x| x.exp()).collect(), Vec::new()),
        Op::Log => {
            if let Some(bad) = a.values.iter().find(|&&x| x <= 0.0 || x.is_nan()) {
                return Err(Error::Domain {
                    op: name,
                    detail: format!("log of non-positive value {bad}; use log_softmax for probabilities"),
                });
            }
            (a.shape.clone(), a.values.iter().map(|x| x.ln()).collect(), Vec::new())
        }
        Op::Softmax | Op::LogSoftmax => {
            let (m, n) = a.as_matrix(name)?;
            let v = if op == Op::Softmax {
                softmax_rows(&a.values, m, n)
            } else {
                log_softmax_rows(&a.values, m, n)
            };
            (a.shape.clone(), v, Vec::new())
        }
        Op::Sum => (Vec::new(), vec![a.values.iter().sum()], Vec::new()),
        Op::Mean => {
            if a.values.is_empty() {
                return Err(Error::shape(name, "mean of an empty tensor"));
            }
            (Vec::new(), vec![a.values.iter().sum::<f64>() / a.values.len() as f64], Vec::new())
        }
        Op::Square => (a.shape.clone(), a.values.iter().map(|x| x * x).collect(), Vec::new()),
        Op::L2Norm => {
            let (m, n) = a.as_matrix(name)?;
            let v = (0..m).map(|i| norm(&a.values[i * n..(i + 1) * n])).collect();
            (rowwise_shape(a), v, Vec::new())
        }
        Op::CosineSimilarity => {
            let b = inputs[1];
            same_shape(b)?;
            let (m, n) = a.as_matrix(name)?;
            let v = (0..m)
                .map(|i| cosine(&a.values[i * n..(i + 1) * n], &b.values[i * n..(i + 1) * n]))
                .collect();
            (rowwise_shape(a), v, Vec::new())
        }
        Op::StopGradient => (a.shape.clone(), a.values.clone(), Vec::new()),
        Op::BatchStandardize { eps } => {
            if a.shape.len() != 2 || a.shape[0] < 2 {
                return Err(Error::shape(
                    name,
                    format!("needs a matrix with at least two rows, got {:?}", a.shape),
                ));
            }
            let (m, n) = (a.shape[0], a.shape[1]);
            let (mean, var) = column_moments(&a.values, m, n);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let out = a
                .values
                .iter()
                .enumerate()
                .map(|(i, &x)| (x - mean[i % n]) * inv_std[i % n])
                .collect();
            (a.shape.clone(), out, inv_std)
        }
    };
    Ok(out)
}

fn rowwise_shape(a: &Tensor) -> Vec<usize> {
    if a.shape.len() == 2 {
        vec![a.shape[0], 1]
    } else {
        vec![1]
    }
}

fn backward_op(op: Op, node: &Node, inputs: &[&Node], g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let a = &inputs[0].value;
    match op {
        Op::Matmul => {
            let b = &inputs[1].value;
            let (m, k) = (inputs[0].shape[0], inputs[0].shape[1]);
            let n = inputs[1].shape[1];
            let ga = inputs[0]
                .requires_grad
                .then(|| matmul(g, &transpose(b, k, n), m, n, k));
            let gb = inputs[1]
                .requires_grad
                .then(|| matmul(&transpose(a, m, k), g, k, m, n));
            vec![ga, gb]
        }
        Op::Transpose => {
            let (m, n) = (inputs[0].shape[0], inputs[0].shape[1]);
            vec![Some(transpose(g, n, m))]
        }
        Op::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
        Op::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|x| -x).collect())],
        Op::Mul => {
            let b = &inputs[1].value;
            vec![
                Some(g.iter().zip(b).map(|(g, b)| g * b).collect()),
                Some(g.iter().zip(a).map(|(g, a)| g * a).collect()),
            ]
        }
        Op::ScalarMul(c) => vec![Some(g.iter().map(|x| c * x).collect())],
        Op::AddRow => {
            let n = inputs[0].shape[1];
            vec![Some(g.to_vec()), Some(column_sums(g, n))]
        }
        Op::MulRow => {
            let v = &inputs[1].value;
            let n = inputs[0].shape[1];
            let ga = g.iter().enumerate().map(|(i, g)| g * v[i % n]).collect();
            let ga_v: Vec<f64> = g.iter().zip(a).map(|(g, a)| g * a).collect();
            vec![Some(ga), Some(column_sums(&ga_v, n))]
        }
        // Subgradient 0 at exactly 0.
        Op::Relu => vec![Some(
            g.iter().zip(a).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
        )],
        Op::Exp => vec![Some(g.iter().zip(&node.value).map(|(g, y)| g * y).collect())],
        Op::Log => vec![Some(g.iter().zip(a).map(|(g, x)| g / x).collect())],
        Op::Softmax => {
            let n = *node.shape.last().unwrap_or(&1);
            let s = &node.value;
            let mut out = vec![0.0; g.len()];
            for r in 0..g.len() / n.max(1) {
                let range = r * n..(r + 1) * n;
                let dot: f64 = g[range.clone()].iter().zip(&s[range.clone()]).map(|(g, s)| g * s).sum();
                for j in range {
                    out[j] = s[j] * (g[j] - dot);
                }
            }
            vec![Some(out)]
        }
        Op::LogSoftmax => {
            let n = *node.shape.last().unwrap_or(&1);
            let mut out = vec![0.0; g.len()];
            for r in 0..g.len() / n.max(1) {
                let range = r * n..(r + 1) * n;
                let total: f64 = g[range.clone()].iter().sum();
                for j in range {
                    out[j] = g[j] - node.value[j].exp() * total;
                }
            }
            vec![Some(out)]
        }
        Op::Sum => vec![Some(vec![g[0]; a.len()])],
        Op::Mean => vec![Some(vec![g[0] / a.len() as f64; a.len()])],
        Op::Square => vec![Some(g.iter().zip(a).map(|(g, x)| 2.0 * x * g).collect())],
        Op::L2Norm => {
            let n = a.len() / node.value.len();
            let mut out = vec![0.0; a.len()];
            for (r, &nr) in node.value.iter().enumerate() {
                if nr > 0.0 {
                    for j in r * n..(r + 1) * n {
                        out[j] = g[r] * a[j] / nr;
                    }
                }
            }
            vec![Some(out)]
        }
        Op::CosineSimilarity => {
            let b = &inputs[1].value;
            let n = a.len() / node.value.len();
            let mut ga = vec![0.0; a.len()];
            let mut gb = vec![0.0; b.len()];
            for r in 0..node.value.len() {
                let range = r * n..(r + 1) * n;
                let (ar, br) = (&a[range.clone()], &b[range.clone()]);
                let (na, nb) = (norm(ar), norm(br));
                let (da, db) = (na + COSINE_NORM_EPS, nb + COSINE_NORM_EPS);
                let dot: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
                let inv = 1.0 / (da * db);
                for (k, j) in range.enumerate() {
                    let mut d_a = br[k] * inv;
                    if na > 0.0 {
                        d_a -= dot * inv / da * ar[k] / na;
                    }
                    let mut d_b = ar[k] * inv;
                    if nb > 0.0 {
                        d_b -= dot * inv / db * br[k] / nb;
                    }
                    ga[j] = g[r] * d_a;
                    gb[j] = g[r] * d_b;
                }
            }
            vec![Some(ga), Some(gb)]
        }
        Op::StopGradient => vec![None],
        Op::BatchStandardize { .. } => {
            let (m, n) = (node.shape[0], node.shape[1]);
            let xhat = &node.value;
            let inv_std = &node.saved;
            let mut mean_g = vec![0.0; n];
            let mut mean_gx = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    mean_g[j] += g[i * n + j];
                    mean_gx[j] += g[i * n + j] * xhat[i * n + j];
                }
            }
            mean_g.iter_mut().for_each(|v| *v /= m as f64);
            mean_gx.iter_mut().for_each(|v| *v /= m as f64);
            let out = (0..m * n)
                .map(|idx| {
                    let j = idx % n;
                    inv_std[j] * (g[idx] - mean_g[j] - xhat[idx] * mean_gx[j])
                })
                .collect();
            vec![Some(out)]
        }
    }
}

/// Row-major product of an `m×k` and a `k×n` matrix.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn column_sums(g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (i, v) in g.iter().enumerate() {
        out[i % n] += v;
    }
    out
}

/// Per-column mean and biased variance of an `m×n` matrix.
pub fn column_moments(a: &[f64], m: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; n];
    for i in 0..m {
        for j in 0..n {
            mean[j] += a[i * n + j];
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let mut var = vec![0.0; n];
    for i in 0..m {
        for j in 0..n {
            let d = a[i * n + j] - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= m as f64);
    (mean, var)
}

pub fn softmax_rows(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let row = &a[r * n..(r + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[r * n..(r + 1) * n];
        let mut total = 0.0;
        for (o, &x) in o.iter_mut().zip(row) {
            *o = (x - max).exp();
            total += *o;
        }
        o.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// `x - max - ln(sum(exp(x - max)))` per row.
pub fn log_softmax_rows(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let row = &a[r * n..(r + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        for (o, &x) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
            *o = x - max - lse;
        }
    }
    out
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / ((norm(a) + COSINE_NORM_EPS) * (norm(b) + COSINE_NORM_EPS))
}

/// Largest relative disagreement between the tape gradient of `f` at `point`
/// and central differences with step `eps`.
///
/// Each coordinate contributes `|analytic - numeric| / max(1e-8, |numeric|)`.
pub fn finite_difference_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("finite difference step must be positive"));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.detach());
    let loss = f(&mut tape, &x)?;
    let grads = tape.backward(&loss)?;
    let analytic = grads.get(&x).expect("leaf requires grad");

    let eval = |values: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(point.shape.clone(), values)?);
        Ok(f(&mut tape, &x)?.item())
    };
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.values.clone();
        plus[i] += eps;
        let mut minus = point.values.clone();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic.values[i] - numeric).abs() / numeric.abs().max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
